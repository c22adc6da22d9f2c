"""Training loop, evaluation and checkpoints."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import RunConfig, derive_seed, rng_for
from .csaa import EntityTable
from .data import (PAD, Corpus, Vocabulary, build_entity_tables, load_embeddings, make_batch,
                   make_batches, vocabulary_words)
from .metrics import EvalReport
from .model import HCSC
from .optim import DivergenceError, OptimizerState, adadelta_step, constrain_columns

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class EmptyCorpusError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    """Raised when the loss or a gradient stops being finite.

    ``model`` holds the last good (best-dev, or pre-divergence) parameters.
    """

    def __init__(self, msg, model=None, log=None):
        super().__init__(msg)
        self.model = model
        self.log = log


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_accuracy: float | None = None
    dev_rmse: float | None = None
    train_accuracy: float | None = None


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    best_dev_accuracy: float | None = None
    stopped: str = ""

    def to_dict(self) -> dict:
        return {
            "epochs": [vars(e) for e in self.epochs],
            "batch_losses": self.batch_losses,
            "best_epoch": self.best_epoch,
            "best_dev_accuracy": self.best_dev_accuracy,
            "stopped": self.stopped,
        }


def build_vocabulary(cfg: RunConfig, train: Corpus) -> Vocabulary:
    rng = rng_for(cfg.seed, "vocab")
    if cfg.embeddings:
        return load_embeddings(cfg.embeddings, vocabulary_words([train]), cfg.word_dim, rng)
    return Vocabulary.build([train], cfg.word_dim, rng)


def build_model(cfg: RunConfig, train: Corpus, vocab: Vocabulary | None = None) -> HCSC:
    if not len(train):
        raise EmptyCorpusError("training split is empty")
    vocab = vocab if vocab is not None else build_vocabulary(cfg, train)
    users, prods = build_entity_tables(train, cfg.hidden_dim, rng_for(cfg.seed, "entities"))
    num_classes = cfg.num_classes or train.num_classes
    return HCSC(cfg, vocab, users, prods, num_classes)


class Trainer:
    """Owns a model, its optimizer state and the step counter."""

    def __init__(self, cfg: RunConfig, train: Corpus, vocab: Vocabulary | None = None,
                 model: HCSC | None = None):
        if not len(train):
            raise EmptyCorpusError("training split is empty")
        self.cfg = cfg
        self.train_corpus = train
        self.model = model if model is not None else build_model(cfg, train, vocab)
        self.params = self.model.named_parameters()
        self.state = OptimizerState(cfg.rho, cfg.adadelta_eps)
        self.steps = 0

    def epoch_batches(self, epoch: int):
        seed = derive_seed(self.cfg.seed, "shuffle", epoch)
        return make_batches(self.train_corpus, self.cfg.batch_size, seed, True, self.model.vocab)

    def step(self, batch) -> float:
        with ad.Tape() as tape:
            loss = self.model.loss(batch, train=True, step=self.steps)
        ad.backward(loss, tape)
        grads = {}
        for name, p in self.params.items():
            grads[name] = p.grad if p.grad is not None else np.zeros(p.shape)
            p.grad = None
        grads["word.embeddings"] = grads["word.embeddings"].copy()
        grads["word.embeddings"][PAD] = 0.0
        adadelta_step(self.params, grads, self.state)
        for w in self.model.constrained_parameters():
            constrain_columns(w, self.cfg.max_norm)
        self.model.zero_pad_embedding()
        self.steps += 1
        return loss.item()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, values in snap.items():
            self.params[name].values = values.copy()


def _dev_subset(cfg: RunConfig, dev: Corpus | None) -> Corpus | None:
    if dev is None or not len(dev) or not cfg.dev_subset or cfg.dev_subset >= len(dev):
        return dev
    pick = np.sort(rng_for(cfg.seed, "dev-subset").choice(len(dev), cfg.dev_subset, replace=False))
    return Corpus([dev.documents[i] for i in pick], dev.num_classes, dev.split)


def train(cfg: RunConfig, train_corpus: Corpus, dev: Corpus | None = None,
          vocab: Vocabulary | None = None, max_batches: int | None = None) -> tuple[HCSC, TrainLog]:
    """Adadelta over shuffled mini-batches with dev-accuracy early stopping.

    Returns the best-dev parameters.  Without a dev split the model after
    ``cfg.max_epochs`` epochs is returned.  ``max_batches`` stops early after
    that many optimizer steps (determinism checks).
    """
    trainer = Trainer(cfg, train_corpus, vocab)
    model = trainer.model
    dev = _dev_subset(cfg, dev)
    history = TrainLog()
    best = None
    patience = 0
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        try:
            for batch in trainer.epoch_batches(epoch):
                losses.append(trainer.step(batch))
                history.batch_losses.append(losses[-1])
                if max_batches is not None and trainer.steps >= max_batches:
                    break
        except (ad.NonFiniteError, DivergenceError) as exc:
            history.stopped = f"diverged: {exc}"
            if best is not None:
                trainer.restore(best)
            raise TrainingDivergedError(str(exc), model, history) from exc
        record = EpochRecord(epoch, float(np.sum(losses)))
        if cfg.log_train_accuracy:
            record.train_accuracy = evaluate(model, train_corpus, cfg.batch_size).accuracy
        history.epochs.append(record)
        if max_batches is not None and trainer.steps >= max_batches:
            history.stopped = "max_batches"
            break
        if dev is None or not len(dev):
            continue
        report = evaluate(model, dev, cfg.batch_size, cfg.workers)
        record.dev_accuracy, record.dev_rmse = report.accuracy, report.rmse
        log.info("epoch %d loss %.4f dev acc %.4f rmse %.4f", epoch, record.train_loss,
                 report.accuracy, report.rmse)
        if history.best_dev_accuracy is None or report.accuracy > history.best_dev_accuracy:
            history.best_dev_accuracy, history.best_epoch = report.accuracy, epoch
            best = trainer.snapshot()
            patience = 0
            if report.accuracy >= 1.0:
                history.stopped = "perfect dev accuracy"
                break
        else:
            patience += 1
            if patience >= cfg.patience:
                history.stopped = "patience"
                break
    else:
        history.stopped = history.stopped or "max_epochs"
    if best is not None:
        trainer.restore(best)
    return model, history


def evaluate(model: HCSC, corpus: Corpus, batch_size: int = 32, workers: int = 1) -> EvalReport:
    """Metrics of the v_up head with dropout off."""
    docs = corpus.documents
    if not docs:
        raise EmptyCorpusError("cannot evaluate an empty split")
    chunks = [(s, docs[s:s + batch_size]) for s in range(0, len(docs), batch_size)]

    def run(chunk):
        start, part = chunk
        return model.predict(make_batch(part, np.arange(start, start + len(part)), model.vocab))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    preds = np.concatenate(parts) + 1
    golds = corpus.labels()
    user_freq = model.users.raw_frequency(model.users.indices(d.user_id for d in docs))
    prod_freq = model.products.raw_frequency(model.products.indices(d.product_id for d in docs))
    return EvalReport.build(preds, golds, model.num_classes, user_freq, prod_freq)


# ---------------------------------------------------------------------------
# checkpoints


def _hash_words(words) -> str:
    return hashlib.sha256("\n".join(words).encode("utf-8")).hexdigest()


def _zip_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def save_checkpoint(model: HCSC, path) -> None:
    """Zip of .npy parameter arrays plus a JSON manifest; byte-stable."""
    users, prods = model.users, model.products
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "num_classes": model.num_classes,
        "vocab": model.vocab.words,
        "vocab_sha256": _hash_words(model.vocab.words),
        "users": sorted(users.ids, key=users.ids.get),
        "products": sorted(prods.ids, key=prods.ids.get),
        "user_frequencies": users.frequencies.tolist(),
        "product_frequencies": prods.frequencies.tolist(),
    }
    with zipfile.ZipFile(path, "w") as zf:
        _zip_entry(zf, "manifest.json", json.dumps(meta, sort_keys=True).encode("utf-8"))
        for name, p in sorted(model.named_parameters().items()):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(p.values), allow_pickle=False)
            _zip_entry(zf, f"params/{name}.npy", buf.getvalue())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> HCSC:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("manifest.json"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
        if _hash_words(meta["vocab"]) != meta["vocab_sha256"]:
            raise CheckpointError("vocabulary hash mismatch")
        arrays = {}
        for name in zf.namelist():
            if name.startswith("params/"):
                arrays[name[len("params/"):-len(".npy")]] = np.lib.format.read_array(
                    io.BytesIO(zf.read(name)), allow_pickle=False)
    cfg = RunConfig.from_dict(meta["config"])
    dim = cfg.hidden_dim
    vocab = Vocabulary(meta["vocab"], np.zeros((len(meta["vocab"]), cfg.word_dim)))
    tables = []
    for side, key in (("user", "users"), ("product", "products")):
        ids = {e: i + 1 for i, e in enumerate(meta[key])}
        tables.append(EntityTable(
            side, ids, ad.Tensor(np.zeros((len(ids) + 1, dim)), True, f"{side}.embeddings"),
            np.asarray(meta[f"{side}_frequencies"]),
            ad.Tensor(np.ones(dim), True, f"{side}.weibull_k"),
            ad.Tensor(np.ones(dim), True, f"{side}.weibull_lambda")))
    model = HCSC(cfg, vocab, tables[0], tables[1], meta["num_classes"])
    params = model.named_parameters()
    if set(params) != set(arrays):
        raise CheckpointError(f"parameter set mismatch: {sorted(set(params) ^ set(arrays))}")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        p.values = arrays[name].copy()
    model.vocab.embeddings = model.word_embeddings.values
    return model
