"""Scores and analysis exports: accuracy, RMSE, frequency buckets, Weibull
curves, attention dumps and timing."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .csaa import GATE_FLOOR, EntityTable

BUCKET_WIDTH = 10
LAST_BUCKET = 100


def _pair(preds, golds) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds)
    golds = np.asarray(golds)
    if preds.shape != golds.shape:
        raise ValueError(f"length mismatch: {preds.shape[0] if preds.ndim else 1} predictions vs "
                         f"{golds.shape[0] if golds.ndim else 1} gold labels")
    if preds.size == 0:
        raise ValueError("no predictions")
    return preds, golds


def accuracy(preds, golds) -> float:
    preds, golds = _pair(preds, golds)
    return float(np.mean(preds == golds))


def rmse(preds, golds) -> float:
    """Root mean squared distance on the original 1-based rating scale."""
    preds, golds = _pair(preds, golds)
    diff = preds.astype(float) - golds.astype(float)
    return float(np.sqrt(np.mean(diff * diff)))


def confusion(preds, golds, num_classes: int) -> np.ndarray:
    """Counts ``[gold, pred]`` for 1-based labels."""
    preds, golds = _pair(preds, golds)
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(out, (golds - 1, preds - 1), 1)
    return out


@dataclass
class BucketRow:
    low: int
    high: int | None  # exclusive; None for the open last bucket
    n: int
    accuracy: float | None

    @property
    def label(self) -> str:
        return f"{self.low}+" if self.high is None else f"{self.low}-{self.high - 1}"


def bucket_of(freq: int) -> int:
    return min(int(freq) // BUCKET_WIDTH, LAST_BUCKET // BUCKET_WIDTH)


def per_frequency_accuracy(preds, golds, frequencies) -> list[BucketRow]:
    """Accuracy per raw training-frequency bucket [f, f+10), last bucket [100, inf)."""
    preds, golds = _pair(preds, golds)
    freqs = np.asarray(frequencies)
    if freqs.shape != preds.shape:
        raise ValueError("one frequency per prediction is required")
    buckets = np.minimum(freqs // BUCKET_WIDTH, LAST_BUCKET // BUCKET_WIDTH)
    rows = []
    for b in range(LAST_BUCKET // BUCKET_WIDTH + 1):
        sel = buckets == b
        n = int(sel.sum())
        acc = float(np.mean(preds[sel] == golds[sel])) if n else None
        high = None if b == LAST_BUCKET // BUCKET_WIDTH else (b + 1) * BUCKET_WIDTH
        rows.append(BucketRow(b * BUCKET_WIDTH, high, n, acc))
    return rows


@dataclass
class EvalReport:
    accuracy: float
    rmse: float
    n: int
    confusion: np.ndarray
    user_buckets: list[BucketRow] = field(default_factory=list)
    product_buckets: list[BucketRow] = field(default_factory=list)
    predictions: np.ndarray | None = None  # 1-based
    golds: np.ndarray | None = None

    @classmethod
    def build(cls, preds, golds, num_classes: int, user_freqs=None, prod_freqs=None) -> "EvalReport":
        preds, golds = _pair(preds, golds)
        return cls(
            accuracy=accuracy(preds, golds),
            rmse=rmse(preds, golds),
            n=int(preds.size),
            confusion=confusion(preds, golds, num_classes),
            user_buckets=per_frequency_accuracy(preds, golds, user_freqs) if user_freqs is not None else [],
            product_buckets=per_frequency_accuracy(preds, golds, prod_freqs) if prod_freqs is not None else [],
            predictions=preds,
            golds=golds,
        )

    def summary(self) -> dict:
        return {"n": self.n, "accuracy": self.accuracy, "rmse": self.rmse}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_csv(header: Sequence[str], rows, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        for line in comment.splitlines():
            buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def buckets_csv(rows: list[BucketRow], side: str, comment: str | None = None) -> str:
    return to_csv(["side", "bucket", "low", "high", "n", "accuracy"],
                  [(side, r.label, r.low, r.high, r.n, r.accuracy) for r in rows], comment)


def report_csv(report: EvalReport, comment: str | None = None) -> str:
    return to_csv(["n", "accuracy", "rmse"], [(report.n, report.accuracy, report.rmse)], comment)


def weibull_curve(table: EntityTable, grid, floor: float = GATE_FLOOR) -> list[tuple[float, float]]:
    """Gate value per normalized frequency with k and lambda reduced to their means."""
    grid = np.asarray(grid, dtype=float)
    if np.any(grid < 0) or np.any(np.diff(grid) < 0):
        raise ValueError("frequency grid must be non-negative and ascending")
    k = float(np.maximum(table.shape_k.values, floor).mean())
    lam = float(np.maximum(table.scale_lam.values, floor).mean())
    g = np.where(grid > 0, 1.0 - np.exp(-np.power(np.where(grid > 0, grid, 1.0) / lam, k)), 0.0)
    return list(zip(grid.tolist(), g.tolist()))


def weibull_curve_csv(curves: dict[str, list[tuple[float, float]]], comment: str | None = None) -> str:
    rows = [(side, f, g) for side, pts in curves.items() for f, g in pts]
    return to_csv(["side", "frequency", "gate"], rows, comment)


def dump_attention(model, documents, batch_size: int = 32) -> list[dict]:
    """Per-document attention weights, gate means and labels (dropout off)."""
    from . import autodiff as ad
    from .data import make_batch

    records = []
    docs = list(documents)
    for start in range(0, len(docs), batch_size):
        chunk = docs[start:start + batch_size]
        batch = make_batch(chunk, np.arange(start, start + len(chunk)), model.vocab)
        with ad.no_tape():
            pooled = model.pool(batch)
            probs = model.head.logits(pooled.v_up).values
        preds = np.argmax(probs, axis=1)
        for r, doc in enumerate(chunk):
            n = len(doc.tokens)

            def row(t):
                return None if t is None else t.values[r, :n].tolist()

            def gate(t):
                return None if t is None else float(t.values[r].mean())

            records.append({
                "user": doc.user_id,
                "product": doc.product_id,
                "tokens": list(doc.tokens),
                "attn_d_user": row(pooled.attn_d_user),
                "attn_s_user": row(pooled.attn_s_user),
                "attn_d_prod": row(pooled.attn_d_prod),
                "attn_s_prod": row(pooled.attn_s_prod),
                "attn_upa": row(pooled.attn_upa),
                "gate_user": gate(pooled.gate_user),
                "gate_prod": gate(pooled.gate_prod),
                "gate_up": gate(pooled.gate_up),
                "user_frequency": int(model.users.raw_frequency(model.users.index(doc.user_id))),
                "product_frequency": int(model.products.raw_frequency(model.products.index(doc.product_id))),
                "predicted": int(preds[r]) + 1,
                "gold": doc.label,
            })
    return records


def to_jsonl(records, header: dict | None = None) -> str:
    lines = []
    if header is not None:
        lines.append(json.dumps({"header": header}, sort_keys=True))
    lines += [json.dumps(r, sort_keys=True) for r in records]
    return "\n".join(lines) + "\n"


@dataclass
class TimingRow:
    mode: str
    batches: int
    seconds: float

    @property
    def batches_per_second(self) -> float:
        return self.batches / self.seconds

    @property
    def seconds_per_batch(self) -> float:
        return self.seconds / self.batches


def variant_config(cfg, mode: str):
    """Same pooled dimension as ``cfg`` with only one encoder half."""
    dim = cfg.hidden_dim
    if mode == "cnn-only":
        if dim % len(cfg.filter_sizes):
            raise ValueError(f"dim {dim} not divisible across {len(cfg.filter_sizes)} filter sizes")
        return cfg.replace(mode=mode, feature_maps=dim // len(cfg.filter_sizes))
    if mode == "rnn-only":
        if dim % 2:
            raise ValueError(f"dim {dim} is odd; cannot split into two LSTM halves")
        return cfg.replace(mode=mode, lstm_size=dim // 2)
    return cfg.replace(mode=mode)


def timing_report(cfg, train, n_batches: int, modes=("cnn-only", "rnn-only", "hybrid"),
                  warmup: int = 3, vocab=None) -> list[TimingRow]:
    """Wall-clock time of ``n_batches`` training steps per encoder variant, after warm-up."""
    from .training import Trainer

    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    rows = []
    for mode in modes:
        trainer = Trainer(variant_config(cfg, mode), train, vocab=vocab)
        batches = trainer.epoch_batches(0)
        for i in range(warmup):
            trainer.step(batches[i % len(batches)])
        start_steps = trainer.steps
        t0 = time.perf_counter()
        for i in range(n_batches):
            trainer.step(batches[(warmup + i) % len(batches)])
        elapsed = time.perf_counter() - t0
        assert trainer.steps - start_steps == n_batches
        rows.append(TimingRow(mode, n_batches, elapsed))
    return rows


def timing_csv(rows: list[TimingRow], comment: str | None = None) -> str:
    return to_csv(["mode", "batches", "seconds", "batches_per_second", "seconds_per_batch"],
                  [(r.mode, r.batches, r.seconds, r.batches_per_second, r.seconds_per_batch) for r in rows],
                  comment)
