"""Adadelta and the per-unit max-norm constraint."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class DivergenceError(FloatingPointError):
    def __init__(self, name: str):
        self.param = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


@dataclass
class OptimizerState:
    rho: float = 0.95
    eps: float = 1e-6
    sq_grad: dict[str, np.ndarray] = field(default_factory=dict)
    sq_update: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


def adadelta_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """In-place Adadelta update of ``params``.

    ``E[g^2] <- rho E[g^2] + (1 - rho) g^2``;
    ``dx = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g``;
    ``E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2``.
    All gradients are checked before any parameter changes.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(name)
    rho, eps = state.rho, state.eps
    for name, g in grads.items():
        p = params[name]
        acc_g = state.sq_grad.get(name)
        if acc_g is None:
            acc_g = state.sq_grad[name] = np.zeros_like(p.values)
            state.sq_update[name] = np.zeros_like(p.values)
        acc_dx = state.sq_update[name]
        acc_g *= rho
        acc_g += (1.0 - rho) * g * g
        dx = -np.sqrt(acc_dx + eps) / np.sqrt(acc_g + eps) * g
        acc_dx *= rho
        acc_dx += (1.0 - rho) * dx * dx
        p.values += dx
    state.steps += 1


def max_norm_constraint(w: np.ndarray, bound: float) -> np.ndarray:
    """Rescale rows whose l2 norm exceeds ``bound`` down to exactly ``bound``."""
    if bound <= 0:
        raise ValueError("bound must be positive")
    w = np.asarray(w, dtype=float)
    norms = np.sqrt((w * w).sum(axis=-1, keepdims=True))
    scale = np.where(norms > bound, bound / np.where(norms > 0, norms, 1.0), 1.0)
    return w * scale


def constrain_columns(t: Tensor, bound: float) -> None:
    """Max-norm over the incoming weights of each output unit of an [in, out] matrix."""
    t.values = np.ascontiguousarray(max_norm_constraint(t.values.T, bound).T)
