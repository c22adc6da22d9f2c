"""The smallest complete model, used by ``grad-check --tiny`` and the tests."""
from __future__ import annotations

import numpy as np

from .config import RunConfig
from .data import Batch, Corpus, Document, make_batch

TINY_DIMS = {
    "hybrid": dict(filter_sizes=(3,), feature_maps=4, lstm_size=2),
    "cnn-only": dict(filter_sizes=(3,), feature_maps=8, lstm_size=2),
    "rnn-only": dict(filter_sizes=(3,), feature_maps=4, lstm_size=4),
}


def tiny_config(mode: str = "hybrid", **overrides) -> RunConfig:
    """D=8 model, C=3, dropout off."""
    values = dict(mode=mode, word_dim=6, dropout=0.0, batch_size=4, seed=3, num_classes=3, **TINY_DIMS[mode])
    values.update(overrides)
    return RunConfig(**values)


def tiny_corpus(seed: int = 0, n_docs: int = 6, length: int = 5) -> Corpus:
    """2 users, 2 products, 18 distinct words (vocab 20 with pad/unk), length-5 docs."""
    rng = np.random.default_rng(seed)
    words = [f"t{i}" for i in range(18)]
    docs = []
    for i in range(n_docs):
        toks = [words[j] for j in rng.permutation(18)[:length]]
        if i < 4:
            toks = words[4 * i:4 * i + length] if 4 * i + length <= 18 else toks
        docs.append(Document(f"u{i % 2}", f"p{(i // 2) % 2}", int(rng.integers(1, 4)), tuple(toks)))
    # make sure every word occurs so the vocabulary has exactly 20 entries
    docs.append(Document("u0", "p1", 2, tuple(words[15:18] + words[:2])))
    return Corpus(docs, 3, "train")


def tiny_problem(mode: str = "hybrid", seed: int = 0, **overrides) -> tuple["HCSC", Batch, Corpus]:
    """Model, one batch holding the whole corpus, and the corpus.

    Entity embeddings and Weibull parameters are moved away from their
    symmetric initial values so every gradient path is exercised.
    """
    from .training import build_model

    corpus = tiny_corpus(seed)
    model = build_model(tiny_config(mode, **overrides), corpus)
    rng = np.random.default_rng(seed + 100)
    for table in (model.users, model.products):
        table.embeddings.values = rng.normal(scale=0.5, size=table.embeddings.shape)
        table.shape_k.values = rng.uniform(0.5, 2.0, size=table.dim)
        table.scale_lam.values = rng.uniform(0.5, 2.0, size=table.dim)
    batch = make_batch(corpus.documents, np.arange(len(corpus)), model.vocab)
    return model, batch, corpus
