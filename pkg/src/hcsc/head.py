"""Shared classifier head and the summed multi-vector loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .csaa import POOLED_NAMES, PooledSet
from .encoder import glorot


@dataclass
class ClassifierHead:
    """``softmax(v W + b)`` with ``W [D, C]``, shared by every pooled vector."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, dim: int, num_classes: int, rng: np.random.Generator) -> "ClassifierHead":
        return cls(Tensor(glorot(rng, (dim, num_classes)), True, "head.W"),
                   Tensor(np.zeros(num_classes), True, "head.b"))

    @property
    def num_classes(self) -> int:
        return self.bias.shape[0]

    def logits(self, v: Tensor) -> Tensor:
        if v.shape[-1] != self.weight.shape[0]:
            raise ad.ShapeError("classifier head", [v.shape, self.weight.shape])
        return ad.affine(v, self.weight, self.bias)


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(v: Tensor, head: ClassifierHead) -> np.ndarray:
    """Class distribution(s) for pooled vector(s) ``v``."""
    with ad.no_tape():
        return softmax(head.logits(v).values)


def multi_vector_loss(pooled: PooledSet, gold, head: ClassifierHead,
                      heads: Iterable[str] = POOLED_NAMES,
                      transform: Callable[[str, Tensor], Tensor] | None = None) -> Tensor:
    """Sum of cross-entropies of the shared head over the enabled pooled vectors.

    ``gold`` holds 0-based class indices, one per batch row.  ``transform``
    (e.g. dropout) is applied to each vector before the head.  Vectors absent
    from ``pooled`` (ablations) are skipped.
    """
    gold = np.atleast_1d(np.asarray(gold, dtype=np.int64))
    if gold.size and (gold.min() < 0 or gold.max() >= head.num_classes):
        raise ValueError(f"gold class outside [0, {head.num_classes})")
    vectors = pooled.vectors()
    wanted = set(heads)
    total = None
    for name in POOLED_NAMES:
        if name not in wanted or name not in vectors:
            continue
        v = vectors[name]
        if v.values.ndim == 1:
            v = ad.reshape(v, (1, v.shape[0]))
        if transform is not None:
            v = transform(name, v)
        term = ad.softmax_cross_entropy(head.logits(v), gold, reduction="sum")
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("no enabled loss heads are available")
    return total
