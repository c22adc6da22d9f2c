"""Corpus and embedding I/O, vocabulary and entity tables, sparsification,
synthetic corpora and batching."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .autodiff import Tensor
from .csaa import UNKNOWN, EntityTable

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
MAX_DOC_LEN = 512


class CorpusFormatError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class EmbeddingFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    user_id: str
    product_id: str
    label: int  # 1-based rating
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("document has no tokens")
        if self.label < 1:
            raise ValueError(f"label {self.label} is below 1")


@dataclass
class Corpus:
    documents: list[Document]
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        for d in self.documents:
            if not 1 <= d.label <= self.num_classes:
                raise ValueError(f"label {d.label} outside 1..{self.num_classes}")

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    @property
    def users(self) -> list[str]:
        return list(dict.fromkeys(d.user_id for d in self.documents))

    @property
    def products(self) -> list[str]:
        return list(dict.fromkeys(d.product_id for d in self.documents))

    def labels(self) -> np.ndarray:
        return np.array([d.label for d in self.documents], dtype=np.int64)


# ---------------------------------------------------------------------------
# corpus files


def _parse_line(raw: str, lineno: int) -> Document:
    if raw.lstrip().startswith("{"):
        try:
            rec = json.loads(raw)
            user, prod, label, tokens = rec["user"], rec["product"], rec["label"], rec["tokens"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CorpusFormatError(f"bad JSON record ({exc})", lineno) from None
        if isinstance(tokens, str):
            tokens = tokens.split()
    else:
        parts = raw.split("\t\t")
        if len(parts) != 4:
            raise CorpusFormatError(f"expected 4 tab-tab separated fields, got {len(parts)}", lineno)
        user, prod, label, text = parts
        tokens = text.split()
    try:
        label = int(label)
    except (TypeError, ValueError):
        raise CorpusFormatError(f"label {label!r} is not an integer", lineno) from None
    if not tokens:
        raise CorpusFormatError("empty text", lineno)
    if label < 1:
        raise CorpusFormatError(f"label {label} out of range", lineno)
    return Document(str(user), str(prod), label, tuple(str(t) for t in tokens))


def load_corpus(path, num_classes: int | None = None, split: str = "train",
                max_len: int | None = MAX_DOC_LEN) -> Corpus:
    """Read a corpus file.

    Lines are ``user\\t\\tproduct\\t\\tlabel\\t\\ttext`` unless the first
    non-blank byte is ``{``, in which case every line is a JSON object with
    keys user, product, label and tokens.  ``max_len`` truncates the tail of
    long documents.
    """
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.rstrip("\n").rstrip("\r")
            if not raw.strip():
                continue
            doc = _parse_line(raw, lineno)
            if num_classes is not None and doc.label > num_classes:
                raise CorpusFormatError(f"label {doc.label} out of range 1..{num_classes}", lineno)
            if max_len is not None and len(doc.tokens) > max_len:
                doc = Document(doc.user_id, doc.product_id, doc.label, doc.tokens[:max_len])
            docs.append(doc)
    if not docs:
        raise CorpusFormatError("empty corpus")
    if num_classes is None:
        num_classes = max(d.label for d in docs)
    return Corpus(docs, num_classes, split)


def save_corpus(corpus: Corpus, path, fmt: str = "tab") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in corpus:
            if fmt == "jsonl":
                rec = {"user": d.user_id, "product": d.product_id, "label": d.label, "tokens": list(d.tokens)}
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            else:
                fh.write(f"{d.user_id}\t\t{d.product_id}\t\t{d.label}\t\t{' '.join(d.tokens)}\n")


# ---------------------------------------------------------------------------
# vocabulary and embeddings


@dataclass
class Vocabulary:
    words: list[str]
    embeddings: np.ndarray
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.words[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocabulary must start with the pad and unknown tokens")
        self.index = {w: i for i, w in enumerate(self.words)}
        self.embeddings = np.asarray(self.embeddings, dtype=float)
        self.embeddings[PAD] = 0.0

    def __len__(self) -> int:
        return len(self.words)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    @classmethod
    def build(cls, corpora, dim: int, rng: np.random.Generator, min_count: int = 1) -> "Vocabulary":
        """Vocabulary over corpus tokens with uniform(-0.25, 0.25) vectors."""
        counts = Counter(t for c in corpora for d in c for t in d.tokens)
        words = [PAD_TOKEN, UNK_TOKEN] + sorted(w for w, n in counts.items() if n >= min_count)
        emb = rng.uniform(-0.25, 0.25, size=(len(words), dim))
        return cls(words, emb)


def vocabulary_words(corpora, min_count: int = 1) -> list[str]:
    counts = Counter(t for c in corpora for d in c for t in d.tokens)
    return sorted(w for w, n in counts.items() if n >= min_count)


def load_embeddings(path, vocab_words: Sequence[str], dim: int, rng: np.random.Generator) -> Vocabulary:
    """Pretrained vectors for known words, uniform(-0.25, 0.25) for the rest."""
    words = [PAD_TOKEN, UNK_TOKEN] + [w for w in vocab_words if w not in (PAD_TOKEN, UNK_TOKEN)]
    index = {w: i for i, w in enumerate(words)}
    emb = rng.uniform(-0.25, 0.25, size=(len(words), dim))
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.rstrip("\n").split(" ")
            parts = [p for p in parts if p] if len(parts) != dim + 1 else parts
            if not parts:
                continue
            word, vals = parts[0], parts[1:]
            if len(vals) != dim:
                raise EmbeddingFormatError(
                    f"line {lineno}: word {word!r} has {len(vals)} values, expected {dim}")
            i = index.get(word)
            if i is not None:
                emb[i] = [float(v) for v in vals]
    return Vocabulary(words, emb)


# ---------------------------------------------------------------------------
# entity tables


def build_entity_tables(train: Corpus, dim: int, rng: np.random.Generator) -> tuple[EntityTable, EntityTable]:
    """User and product tables from the training split only.

    Entities are indexed from 1 in order of first appearance; index 0 is the
    unknown entity, initialized to the mean of the others.
    """
    if not len(train):
        raise ValueError("cannot build entity tables from an empty corpus")
    tables = []
    for side, key in (("user", "user_id"), ("product", "product_id")):
        counts = Counter(getattr(d, key) for d in train)
        ids = {e: i + 1 for i, e in enumerate(dict.fromkeys(getattr(d, key) for d in train))}
        freqs = np.zeros(len(ids) + 1, dtype=np.int64)
        for e, i in ids.items():
            freqs[i] = counts[e]
        emb = rng.uniform(-0.01, 0.01, size=(len(ids) + 1, dim))
        emb[UNKNOWN] = emb[1:].mean(axis=0)
        tables.append(EntityTable(
            side=side, ids=ids,
            embeddings=Tensor(emb, True, f"{side}.embeddings"),
            frequencies=freqs,
            shape_k=Tensor(np.ones(dim), True, f"{side}.weibull_k"),
            scale_lam=Tensor(np.ones(dim), True, f"{side}.weibull_lambda"),
        ))
    return tables[0], tables[1]


# ---------------------------------------------------------------------------
# sparsification


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class SparsifyResult:
    corpus: Corpus
    removed_users: list[str]
    removed_products: list[str]


def sparsify_detail(train: Corpus, x: float, seed: int) -> SparsifyResult:
    if not 0 <= x < 100:
        raise ValueError("x must be a percentage in (0, 100)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A17]))
    users, prods = train.users, train.products
    n_users = _round_half_up(x / 100.0 * len(users))
    n_prods = _round_half_up(x / 100.0 * len(prods))
    drop_u = [users[i] for i in sorted(rng.choice(len(users), size=n_users, replace=False))]
    drop_p = [prods[i] for i in sorted(rng.choice(len(prods), size=n_prods, replace=False))]
    du, dp = set(drop_u), set(drop_p)
    kept = [d for d in train if d.user_id not in du and d.product_id not in dp]
    if not kept:
        raise ValueError(f"sparsifying at x={x} removed every document")
    return SparsifyResult(Corpus(kept, train.num_classes, train.split), drop_u, drop_p)


def sparsify(train: Corpus, x: float, seed: int) -> Corpus:
    """Remove every review of x% of users and (independently) x% of products."""
    if not 0 < x < 100:
        raise ValueError("x must be a percentage in (0, 100)")
    return sparsify_detail(train, x, seed).corpus


# ---------------------------------------------------------------------------
# synthetic corpora


class SynthSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    """Desk-scale corpus generator settings.

    ``signal`` selects how labels arise:

    * ``word``: every document contains one keyword naming its label.
    * ``user``: users belong to ``clusters`` groups, each caring about one
      aspect.  Every document mentions all aspects, each with a random
      polarity; the label is the polarity of the author's aspect.  Documents
      also carry style words of the author's group, so a new user can be
      matched to similar users by word usage.
    * ``mixed``: ``user`` documents where half also carry the label keyword.

    ``cold_users`` / ``cold_products`` entities never appear in train; a
    ``cold_fraction`` share of dev/test documents is written by them.
    """

    users: int = 8
    products: int = 8
    vocab: int = 30
    classes: int = 4
    docs: int = 64
    signal: str = "word"
    seed: int = 0
    dev_docs: int = 0
    test_docs: int = 0
    doc_len: int = 10
    clusters: int | None = None
    style_words: int = 2
    cold_users: int = 0
    cold_products: int = 0
    cold_fraction: float = 0.0

    @property
    def n_clusters(self) -> int:
        return self.classes if self.clusters is None else self.clusters


def _synth_tokens(spec: SynthSpec, rng, label, cluster):
    filler = [f"w{j}" for j in rng.integers(0, spec.vocab, size=spec.doc_len)]
    if spec.signal == "word":
        filler[rng.integers(0, len(filler))] = f"kw{label}"
        return filler, label
    polarities = rng.integers(1, spec.classes + 1, size=spec.n_clusters)
    label = int(polarities[cluster])
    # Aspect mentions are separated by filler so local windows rarely mix them.
    tokens = []
    for i, a in enumerate(rng.permutation(spec.n_clusters)):
        if i < len(filler):
            tokens.append(filler[i])
        tokens.append(f"asp{a}_pol{polarities[a]}")
    tokens += filler[spec.n_clusters:]
    for _ in range(2):
        style = f"style{cluster}_{rng.integers(0, spec.style_words)}"
        tokens.insert(int(rng.integers(0, len(tokens) + 1)), style)
    if spec.signal == "mixed" and rng.random() < 0.5:
        tokens.insert(int(rng.integers(0, len(tokens) + 1)), f"kw{label}")
    return tokens, label


def synth_dataset(spec: SynthSpec) -> tuple[Corpus, Corpus, Corpus]:
    """Deterministic (train, dev, test) corpora for tests and demos."""
    if spec.signal not in ("word", "user", "mixed"):
        raise SynthSpecError(f"unknown signal type {spec.signal!r}")
    for name in ("users", "products", "vocab", "classes", "docs", "doc_len"):
        if getattr(spec, name) <= 0:
            raise SynthSpecError(f"{name} must be positive")
    if spec.signal != "word" and spec.n_clusters > spec.classes:
        raise SynthSpecError("more planted clusters than classes")
    if spec.signal != "word" and spec.n_clusters > spec.users:
        raise SynthSpecError("more planted clusters than users")
    rng = np.random.default_rng(spec.seed)
    warm_users = [f"u{i}" for i in range(spec.users)]
    cold_users = [f"cu{i}" for i in range(spec.cold_users)]
    warm_prods = [f"p{i}" for i in range(spec.products)]
    cold_prods = [f"cp{i}" for i in range(spec.cold_products)]
    cluster_of = {u: i % spec.n_clusters for i, u in enumerate(warm_users)}
    cluster_of.update({u: i % spec.n_clusters for i, u in enumerate(cold_users)})

    def make(n: int, split: str, allow_cold: bool) -> Corpus:
        docs = []
        for j in range(n):
            cold = allow_cold and rng.random() < spec.cold_fraction
            if split == "train":
                # Cycle through users first so every warm user appears in train.
                user = warm_users[j % len(warm_users)] if j < len(warm_users) else \
                    warm_users[rng.integers(0, len(warm_users))]
            else:
                pool = cold_users if cold and cold_users else warm_users
                user = pool[rng.integers(0, len(pool))]
            ppool = cold_prods if cold and cold_prods else warm_prods
            prod = ppool[rng.integers(0, len(ppool))]
            label = int(rng.integers(1, spec.classes + 1))
            tokens, label = _synth_tokens(spec, rng, label, cluster_of[user])
            docs.append(Document(user, prod, label, tuple(tokens)))
        return Corpus(docs, spec.classes, split)

    train = make(spec.docs, "train", False)
    dev = make(spec.dev_docs, "dev", True)
    test = make(spec.test_docs, "test", True)
    return train, dev, test


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    documents: list[Document]
    positions: np.ndarray  # corpus indices
    token_ids: np.ndarray | None  # [B, N]
    mask: np.ndarray  # [B, N]
    labels: np.ndarray  # 0-based

    def __len__(self) -> int:
        return len(self.documents)


def make_batch(docs: Sequence[Document], positions, vocab: Vocabulary | None = None) -> Batch:
    width = max(len(d.tokens) for d in docs)
    mask = np.zeros((len(docs), width))
    ids = np.zeros((len(docs), width), dtype=np.int64) if vocab is not None else None
    for r, d in enumerate(docs):
        mask[r, : len(d.tokens)] = 1.0
        if ids is not None:
            ids[r, : len(d.tokens)] = vocab.encode(d.tokens)
    labels = np.array([d.label - 1 for d in docs], dtype=np.int64)
    return Batch(list(docs), np.asarray(positions, dtype=np.int64), ids, mask, labels)


def make_batches(corpus: Corpus, batch_size: int, seed: int = 0, shuffle: bool = True,
                 vocab: Vocabulary | None = None) -> list[Batch]:
    """Split the corpus into right-padded batches, each document exactly once."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(corpus))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(corpus))
    docs = corpus.documents
    return [make_batch([docs[i] for i in order[s:s + batch_size]], order[s:s + batch_size], vocab)
            for s in range(0, len(order), batch_size)]
