"""Cold-start aware attention.

For each side (user, product) a document gets a *distinct* pooled vector,
attended with the entity's own embedding, and a *shared* pooled vector,
attended with a similarity-weighted mix of the other entities' embeddings.
A Weibull CDF of the entity's normalized review count blends the two, and a
sigmoid gate merges the user and product results into ``v_up``.

Functions work on batches: ``words [B, n, D]``, ``mask [B, n]``, entity
indices ``[B]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import glorot

GATE_FLOOR = 1e-3
UNKNOWN = 0

POOLED_NAMES = ("v_d_user", "v_d_prod", "v_s_user", "v_s_prod", "v_user", "v_prod", "v_up")


class EmptyCandidatePoolError(ValueError):
    pass


@dataclass
class EntityTable:
    """Embeddings, training review counts and Weibull gate parameters for one side.

    Index 0 is the reserved unknown entity.  ``frequencies`` holds raw
    training counts; :meth:`normalized_frequency` divides by the average over
    known entities.
    """

    side: str
    ids: dict[str, int]
    embeddings: Tensor
    frequencies: np.ndarray
    shape_k: Tensor
    scale_lam: Tensor

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=np.int64)
        if self.frequencies.shape != (self.embeddings.shape[0],):
            raise ValueError("one frequency per embedding row is required")
        if self.frequencies[UNKNOWN] != 0:
            raise ValueError("the unknown entity must have frequency 0")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def avg_frequency(self) -> float:
        known = self.frequencies[1:]
        return float(known.mean()) if known.size else 1.0

    def index(self, entity_id: str) -> int:
        return self.ids.get(entity_id, UNKNOWN)

    def indices(self, entity_ids) -> np.ndarray:
        return np.array([self.ids.get(e, UNKNOWN) for e in entity_ids], dtype=np.int64)

    def raw_frequency(self, idx) -> np.ndarray:
        return self.frequencies[np.asarray(idx, dtype=np.int64)]

    def normalized_frequency(self, idx) -> np.ndarray:
        return self.raw_frequency(idx) / self.avg_frequency


@dataclass
class AttentionParams:
    """Additive attention ``v^T tanh(W_w w_i + W_c c + b)``."""

    w_word: Tensor
    w_ctx: Tensor
    bias: Tensor
    v: Tensor

    @classmethod
    def init(cls, dim: int, att_dim: int, rng: np.random.Generator, prefix: str, ctx_dim=None):
        ctx_dim = dim if ctx_dim is None else ctx_dim
        return cls(
            Tensor(glorot(rng, (dim, att_dim)), True, f"{prefix}.W_w"),
            Tensor(glorot(rng, (ctx_dim, att_dim)), True, f"{prefix}.W_c"),
            Tensor(np.zeros(att_dim), True, f"{prefix}.b"),
            Tensor(glorot(rng, (att_dim, 1)), True, f"{prefix}.v"),
        )

    def tensors(self) -> list[Tensor]:
        return [self.w_word, self.w_ctx, self.bias, self.v]


@dataclass
class SideParams:
    distinct: AttentionParams
    shared: AttentionParams
    similarity: Tensor  # W^s, [D, D]

    def tensors(self) -> list[Tensor]:
        return self.distinct.tensors() + self.shared.tensors() + [self.similarity]


@dataclass
class UPAParams:
    w_word: Tensor
    w_user: Tensor
    w_prod: Tensor
    bias: Tensor
    v: Tensor

    @classmethod
    def init(cls, dim: int, att_dim: int, rng: np.random.Generator):
        return cls(
            Tensor(glorot(rng, (dim, att_dim)), True, "upa.W_w"),
            Tensor(glorot(rng, (dim, att_dim)), True, "upa.W_u"),
            Tensor(glorot(rng, (dim, att_dim)), True, "upa.W_p"),
            Tensor(np.zeros(att_dim), True, "upa.b"),
            Tensor(glorot(rng, (att_dim, 1)), True, "upa.v"),
        )

    def tensors(self) -> list[Tensor]:
        return [self.w_word, self.w_user, self.w_prod, self.bias, self.v]


@dataclass
class CombineParams:
    weight: Tensor  # [2D, D]
    bias: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator):
        return cls(Tensor(glorot(rng, (2 * dim, dim)), True, "combine.W_g"),
                   Tensor(np.zeros(dim), True, "combine.b_g"))


@dataclass
class PooledSet:
    """The seven pooled vectors plus attention and gate diagnostics (batched).

    Vectors are ``[B, D]``; attention rows ``[B, n]``; similarity rows
    ``[B, K]``.  In ablation modes the vectors that do not exist are None.
    """

    v_d_user: Tensor | None = None
    v_d_prod: Tensor | None = None
    v_s_user: Tensor | None = None
    v_s_prod: Tensor | None = None
    v_user: Tensor | None = None
    v_prod: Tensor | None = None
    v_up: Tensor | None = None
    gate_user: Tensor | None = None
    gate_prod: Tensor | None = None
    gate_up: Tensor | None = None
    attn_d_user: Tensor | None = None
    attn_s_user: Tensor | None = None
    attn_d_prod: Tensor | None = None
    attn_s_prod: Tensor | None = None
    sim_user: Tensor | None = None
    sim_prod: Tensor | None = None
    attn_upa: Tensor | None = None
    extras: dict = field(default_factory=dict)

    def vectors(self) -> dict[str, Tensor]:
        """Pooled vectors present in this set, in canonical order."""
        out = {}
        for name in POOLED_NAMES:
            t = getattr(self, name)
            if t is not None:
                out[name] = t
        return out


def _attend(words: Tensor, mask: np.ndarray, ctx_terms: list[Tensor], params_bias: Tensor,
            w_word: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    batch, n, _ = words.shape
    mask = np.asarray(mask, dtype=float)
    if mask.shape != (batch, n):
        raise ad.ShapeError("attend", [words.shape, mask.shape])
    if np.any(mask.sum(axis=1) == 0):
        raise ad.MaskError("attention over a fully masked sequence")
    hidden = ad.add(ad.matmul(words, w_word), params_bias)
    for term in ctx_terms:
        hidden = ad.add(hidden, ad.reshape(term, (batch, 1, term.shape[-1])))
    energies = ad.reshape(ad.matmul(ad.tanh(hidden), v), (batch, n))
    weights = ad.masked_softmax(energies, mask, axis=-1)
    return ad.weighted_sum(weights, words), weights


def distinct_attend(words: Tensor, mask: np.ndarray, context: Tensor, params: AttentionParams):
    """Pool ``words`` with additive attention conditioned on ``context [B, D]``.

    Returns ``(v [B, D], a [B, n])``; ``a`` is exactly 0 at masked positions.
    """
    return _attend(words, mask, [ad.matmul(context, params.w_ctx)], params.bias, params.w_word, params.v)


def shared_attend(words: Tensor, mask: np.ndarray, ctx: Tensor, params: AttentionParams):
    return distinct_attend(words, mask, ctx, params)


def candidate_mask(table_size: int, exclude) -> np.ndarray:
    exclude = np.asarray(exclude, dtype=np.int64)
    mask = np.ones((exclude.shape[0], table_size))
    mask[:, UNKNOWN] = 0.0
    mask[np.arange(exclude.shape[0]), exclude] = 0.0
    return mask


def shared_context(words_mean: Tensor, table: EntityTable, exclude, similarity: Tensor):
    """Similarity-weighted mix of the other entities' embeddings.

    Energies are ``mean(words) W^s u_k`` over every entity except the
    document's own one and the unknown slot, which both get weight 0.
    Returns ``(ctx [B, D], sim [B, K])``.
    """
    mask = candidate_mask(table.size, exclude)
    if np.any(mask.sum(axis=1) == 0):
        raise EmptyCandidatePoolError(f"no {table.side} candidates left for the shared context")
    energies = ad.matmul(ad.matmul(words_mean, similarity), ad.transpose(table.embeddings))
    sim = ad.masked_softmax(energies, mask, axis=-1)
    return ad.matmul(sim, table.embeddings), sim


def weibull_gate(freq, shape_k: Tensor, scale_lam: Tensor, floor: float = GATE_FLOOR) -> Tensor:
    """``1 - exp(-(f / relu(lam)) ** relu(k))`` per document, ``[B, D]``.

    ``freq`` holds normalized review counts, one per document.  Both relus
    are floored at ``floor``; a zero count yields an exact zero gate.
    """
    freq = np.asarray(freq, dtype=float).reshape(-1)
    if np.any(freq < 0):
        raise ValueError("review frequency must be non-negative")
    seen = (freq > 0).astype(float)[:, None]
    safe = np.where(freq > 0, freq, 1.0)[:, None]
    k = ad.relu(shape_k, floor=floor)
    lam = ad.relu(scale_lam, floor=floor)
    # (f / lam) ** k in log space: f / lam underflows for denormal f.
    log_ratio = ad.sub(Tensor(np.log(safe)), ad.log(lam))
    scaled = ad.exp(ad.mul(k, log_ratio))
    gate = ad.rsub_scalar(ad.exp(ad.mul_scalar(scaled, -1.0)), 1.0)
    return ad.mul(gate, Tensor(seen))


@dataclass(frozen=True)
class Switches:
    disable_shared: bool = False
    disable_gate: bool = False
    upa_baseline: bool = False


def entity_pool(words: Tensor, mask: np.ndarray, idx, table: EntityTable, params: SideParams,
                words_mean: Tensor | None = None, switches: Switches = Switches()):
    """User- or product-specific pooled vector ``g * v_d + (1 - g) * v_s``.

    Returns ``(v, diagnostics)`` where diagnostics maps ``v_d``, ``v_s``,
    ``a_d``, ``a_s``, ``sim`` and ``g`` to tensors (None when ablated).
    """
    idx = np.asarray(idx, dtype=np.int64)
    own = ad.embedding(table.embeddings, idx)
    v_d, a_d = distinct_attend(words, mask, own, params.distinct)
    diag = {"v_d": v_d, "a_d": a_d, "v_s": None, "a_s": None, "sim": None, "g": None}
    if switches.disable_shared:
        return v_d, diag
    if words_mean is None:
        words_mean = ad.masked_mean(words, np.asarray(mask, dtype=float), axis=1)
    ctx, sim = shared_context(words_mean, table, idx, params.similarity)
    v_s, a_s = shared_attend(words, mask, ctx, params.shared)
    diag.update(v_s=v_s, a_s=a_s, sim=sim)
    if switches.disable_gate:
        return v_d, diag
    g = weibull_gate(table.normalized_frequency(idx), table.shape_k, table.scale_lam)
    diag["g"] = g
    return ad.blend(g, v_d, v_s), diag


def combine_user_product(v_user: Tensor, v_prod: Tensor, params: CombineParams):
    """Sigmoid gate over ``[v_u; v_p]``; returns ``(v_up, g_up)``."""
    if v_user.shape != v_prod.shape:
        raise ad.ShapeError("combine_user_product", [v_user.shape, v_prod.shape])
    g = ad.sigmoid(ad.affine(ad.concat([v_user, v_prod], axis=-1), params.weight, params.bias))
    return ad.blend(g, v_user, v_prod), g


def upa_attend(words: Tensor, mask: np.ndarray, user: Tensor, prod: Tensor, params: UPAParams):
    """Single attention conditioned jointly on user and product vectors."""
    terms = [ad.matmul(user, params.w_user), ad.matmul(prod, params.w_prod)]
    return _attend(words, mask, terms, params.bias, params.w_word, params.v)


def pool_document(words: Tensor, mask: np.ndarray, user_idx, prod_idx,
                  user_table: EntityTable, prod_table: EntityTable,
                  user_params: SideParams, prod_params: SideParams, combine: CombineParams,
                  switches: Switches = Switches(), upa: UPAParams | None = None) -> PooledSet:
    mask = np.asarray(mask, dtype=float)
    if switches.upa_baseline:
        if upa is None:
            raise ValueError("UPA baseline requested without UPA parameters")
        u = ad.embedding(user_table.embeddings, np.asarray(user_idx, dtype=np.int64))
        p = ad.embedding(prod_table.embeddings, np.asarray(prod_idx, dtype=np.int64))
        v, a = upa_attend(words, mask, u, p, upa)
        return PooledSet(v_up=v, attn_upa=a)
    words_mean = None if switches.disable_shared else ad.masked_mean(words, mask, axis=1)
    v_u, du = entity_pool(words, mask, user_idx, user_table, user_params, words_mean, switches)
    v_p, dp = entity_pool(words, mask, prod_idx, prod_table, prod_params, words_mean, switches)
    v_up, g_up = combine_user_product(v_u, v_p, combine)
    return PooledSet(
        v_d_user=du["v_d"], v_d_prod=dp["v_d"], v_s_user=du["v_s"], v_s_prod=dp["v_s"],
        v_user=v_u, v_prod=v_p, v_up=v_up,
        gate_user=du["g"], gate_prod=dp["g"], gate_up=g_up,
        attn_d_user=du["a_d"], attn_s_user=du["a_s"], attn_d_prod=dp["a_d"], attn_s_prod=dp["a_s"],
        sim_user=du["sim"], sim_prod=dp["sim"],
    )
