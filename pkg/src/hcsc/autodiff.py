"""Minimal tape-based reverse-mode differentiation over dense numpy arrays.

Only the primitives the HCSC forward pass needs are provided.  Every
primitive is a function ``(arrays, **attrs) -> (output, vjp)`` registered in
``PRIMITIVES``; ``apply_primitive`` runs it and, when a :class:`Tape` is
active and some input requires a gradient, records it for :func:`backward`.

Binary elementwise ops follow numpy broadcasting; gradients are summed back
to the operand shape.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class AutodiffError(Exception):
    """Base class for engine errors."""


class ShapeError(AutodiffError):
    def __init__(self, primitive: str, shapes: Iterable[tuple], detail: str = ""):
        self.primitive = primitive
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{primitive}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class MaskError(AutodiffError):
    pass


class ZeroDivisorError(AutodiffError):
    pass


class DomainError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class StaleTapeError(AutodiffError):
    pass


class Tensor:
    """Dense real array with an optional gradient slot."""

    __slots__ = ("values", "requires_grad", "grad", "name", "_tape")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Operator sugar for tests and small expressions.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("kind", "inputs", "output", "vjp")

    def __init__(self, kind, inputs, output, vjp):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; primitives executed inside the block are
    recorded.  Each tape supports exactly one :func:`backward` call.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_tape:
    """Suspend recording (evaluation, finite-difference probes)."""

    def __enter__(self):
        _tape_stack().append(None)

    def __exit__(self, *exc):
        _tape_stack().pop()


PRIMITIVES: dict[str, Callable] = {}


def primitive(name: str):
    def register(fn):
        PRIMITIVES[name] = fn
        return fn

    return register


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise AutodiffError(f"unknown primitive {kind!r}") from None
    arrays = [t.values for t in inputs]
    out, vjp = fn(arrays, **(attrs or {}))
    out = np.asarray(out, dtype=DTYPE)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind}: non-finite output")
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs_grad)
    if needs_grad:
        result._tape = tape
        tape.records.append(_Record(kind, list(inputs), result, vjp))
    return result


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Attach gradients of ``loss`` to every requires_grad tensor on the tape.

    Leaf tensors that appear on the tape but do not influence the loss get a
    zero gradient.
    """
    if loss.size != 1:
        raise ShapeError("backward", [loss.shape], "loss must be scalar")
    tape = tape if tape is not None else loss._tape
    if tape is None:
        raise AutodiffError("loss was not produced on a tape")
    if loss._tape is not tape:
        raise AutodiffError("loss was not produced on this tape")
    if tape.consumed:
        raise StaleTapeError("backward already ran on this tape; run a new forward pass")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    seen: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        for t in rec.inputs:
            if t.requires_grad:
                seen.setdefault(id(t), t)
        g_out = grads.pop(id(rec.output), None)
        rec.output.grad = g_out
        if g_out is None:
            continue
        in_grads = rec.vjp(g_out)
        for t, g in zip(rec.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.asarray(g, dtype=DTYPE)
    for key, t in seen.items():
        if t._tape is tape:
            continue
        g = grads.get(key)
        t.grad = np.zeros(t.shape, dtype=DTYPE) if g is None else g.reshape(t.shape)


def grad_check(fn: Callable[[int], Tensor], params: Sequence[Tensor],
               step: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn(seed)`` must return a scalar tensor and be deterministic for a fixed
    seed.  The error per entry is ``|a - n| / max(1, |a|, |n|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    with Tape() as tape:
        loss = fn(seed)
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ShapeError("grad_check", [getattr(loss, "shape", ())], "fn must return a scalar")
    if loss._tape is None:
        # Nothing on the tape depends on params: analytic gradient is zero.
        analytic = [np.zeros(p.shape) for p in params]
    else:
        backward(loss, tape)
        analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_tape():
        for p, a in zip(params, analytic):
            flat = p.values.reshape(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = fn(seed).item()
                flat[i] = orig - step
                down = fn(seed).item()
                flat[i] = orig
                num = (up - down) / (2.0 * step)
                err = abs(a_flat[i] - num) / max(1.0, abs(a_flat[i]), abs(num))
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# primitive kernels


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, [a.shape, b.shape]) from None


@primitive("add")
def _add(xs):
    a, b = xs
    _broadcast_shape("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@primitive("sub")
def _sub(xs):
    a, b = xs
    _broadcast_shape("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


@primitive("mul")
def _mul(xs):
    a, b = xs
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@primitive("div")
def _div(xs):
    a, b = xs
    _broadcast_shape("div", a, b)
    if np.any(b == 0):
        raise ZeroDivisorError("div: zero divisor")
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


@primitive("add_scalar")
def _add_scalar(xs, value):
    (a,) = xs
    return a + value, lambda g: (g,)


@primitive("mul_scalar")
def _mul_scalar(xs, value):
    (a,) = xs
    return a * value, lambda g: (g * value,)


@primitive("rsub_scalar")
def _rsub_scalar(xs, value):
    (a,) = xs
    return value - a, lambda g: (-g,)


@primitive("tanh")
def _tanh(xs):
    out = np.tanh(xs[0])
    return out, lambda g: (g * (1.0 - out * out),)


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@primitive("sigmoid")
def _sigmoid(xs):
    out = _stable_sigmoid(np.asarray(xs[0], dtype=DTYPE))
    return out, lambda g: (g * out * (1.0 - out),)


@primitive("relu")
def _relu(xs, floor=0.0):
    # floor > 0 gives max(x, floor): the gradient passes only above the floor.
    (a,) = xs
    active = a > floor
    out = np.where(active, a, floor)
    return out, lambda g: (g * active,)


@primitive("exp")
def _exp(xs):
    out = np.exp(xs[0])
    return out, lambda g: (g * out,)


@primitive("log")
def _log(xs):
    (a,) = xs
    if np.any(a <= 0):
        raise DomainError("log: non-positive input")
    return np.log(a), lambda g: (g / a,)


@primitive("power")
def _power(xs):
    # a ** b evaluated as exp(b * ln a); requires a > 0.
    a, b = xs
    _broadcast_shape("power", a, b)
    if np.any(a <= 0):
        raise DomainError("power: base must be positive")
    log_a = np.log(a)
    out = np.exp(b * log_a)
    return out, lambda g: (_unbroadcast(g * b * out / a, a.shape),
                           _unbroadcast(g * out * log_a, b.shape))


@primitive("matmul")
def _matmul(xs):
    a, b = xs
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape])
    out = a @ b

    def vjp(g):
        ga = g @ b.T
        if a.ndim == 1:
            gb = np.outer(a, g)
        else:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return out, vjp


@primitive("affine")
def _affine(xs):
    x, w, b = xs
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("affine", [x.shape, w.shape, b.shape])
    out = x @ w + b

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = g @ w.T
        gw = x.reshape(-1, w.shape[0]).T @ g2
        return gx, gw, g2.sum(axis=0)

    return out, vjp


@primitive("transpose")
def _transpose(xs):
    (a,) = xs
    if a.ndim != 2:
        raise ShapeError("transpose", [a.shape], "expects a matrix")
    return a.T, lambda g: (g.T,)


@primitive("reshape")
def _reshape(xs, shape):
    (a,) = xs
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [a.shape, tuple(shape)]) from None
    return out, lambda g: (g.reshape(a.shape),)


def _norm_axis(axis, ndim):
    return axis + ndim if axis < 0 else axis


@primitive("concat")
def _concat(xs, axis=-1):
    ndim = xs[0].ndim
    ax = _norm_axis(axis, ndim)
    for x in xs:
        if x.ndim != ndim or any(x.shape[i] != xs[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError("concat", [x.shape for x in xs], f"axis={axis}")
    out = np.concatenate(xs, axis=ax)
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=ax))


@primitive("slice")
def _slice(xs, axis, start, stop):
    (a,) = xs
    ax = _norm_axis(axis, a.ndim)
    if not 0 <= start <= stop <= a.shape[ax]:
        raise ShapeError("slice", [a.shape], f"axis={axis} range=[{start},{stop})")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return a[index], vjp


@primitive("index")
def _index(xs, axis, i):
    (a,) = xs
    ax = _norm_axis(axis, a.ndim)
    if not 0 <= i < a.shape[ax]:
        raise ShapeError("index", [a.shape], f"axis={axis} i={i}")

    def vjp(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        idx = [slice(None)] * a.ndim
        idx[ax] = i
        full[tuple(idx)] = g
        return (full,)

    return np.take(a, i, axis=ax), vjp


@primitive("stack")
def _stack(xs, axis=0):
    if any(x.shape != xs[0].shape for x in xs):
        raise ShapeError("stack", [x.shape for x in xs])
    out = np.stack(xs, axis=axis)
    ax = _norm_axis(axis, out.ndim)
    return out, lambda g: tuple(np.moveaxis(g, ax, 0))


@primitive("pad")
def _pad(xs, axis, before, after):
    (a,) = xs
    ax = _norm_axis(axis, a.ndim)
    widths = [(0, 0)] * a.ndim
    widths[ax] = (before, after)
    out = np.pad(a, widths)
    index = [slice(None)] * a.ndim
    index[ax] = slice(before, before + a.shape[ax])
    index = tuple(index)
    return out, lambda g: (g[index],)


@primitive("sum")
def _sum(xs, axis=None):
    (a,) = xs
    out = a.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return out, vjp


def _check_mask(name, x, mask, axis):
    ax = _norm_axis(axis, x.ndim)
    if mask.shape != x.shape[: ax + 1]:
        raise ShapeError(name, [x.shape, mask.shape], f"mask must cover dims up to axis {axis}")
    if not np.all((mask == 0) | (mask == 1)):
        raise MaskError(f"{name}: mask must be 0/1 valued")
    if np.any(mask.sum(axis=ax) == 0):
        raise MaskError(f"{name}: fully masked group")
    return ax


@primitive("masked_softmax")
def _masked_softmax(xs, mask, axis=-1):
    (a,) = xs
    mask = np.asarray(mask, dtype=DTYPE)
    if mask.shape != a.shape:
        raise ShapeError("masked_softmax", [a.shape, mask.shape])
    ax = _norm_axis(axis, a.ndim)
    if not np.all((mask == 0) | (mask == 1)):
        raise MaskError("masked_softmax: mask must be 0/1 valued")
    if np.any(mask.sum(axis=ax) == 0):
        raise MaskError("masked_softmax: fully masked group")
    keep = mask > 0
    shifted = np.where(keep, a, -np.inf)
    shifted = shifted - shifted.max(axis=ax, keepdims=True)
    e = np.where(keep, np.exp(shifted), 0.0)
    out = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - inner),)

    return out, vjp


@primitive("masked_mean")
def _masked_mean(xs, mask, axis):
    (a,) = xs
    mask = np.asarray(mask, dtype=DTYPE)
    ax = _check_mask("masked_mean", a, mask, axis)
    m = mask.reshape(mask.shape + (1,) * (a.ndim - mask.ndim))
    count = mask.sum(axis=ax, keepdims=True)
    count = count.reshape(count.shape + (1,) * (a.ndim - count.ndim))
    out = (a * m).sum(axis=ax) / np.squeeze(count, axis=ax)
    return out, lambda g: (np.expand_dims(g, ax) * m / count,)


@primitive("weighted_sum")
def _weighted_sum(xs):
    # weights [..., n], x [..., n, d] -> [..., d]
    w, x = xs
    if x.ndim != w.ndim + 1 or x.shape[:-1] != w.shape:
        raise ShapeError("weighted_sum", [w.shape, x.shape])
    out = np.einsum("...n,...nd->...d", w, x)
    return out, lambda g: (np.einsum("...d,...nd->...n", g, x), w[..., None] * g[..., None, :])


@primitive("dropout")
def _dropout(xs, rate, train, rng):
    (a,) = xs
    if not train or rate == 0.0:
        return a, lambda g: (g,)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return a * keep, lambda g: (g * keep,)


@primitive("embedding")
def _embedding(xs, ids):
    (table,) = xs
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or (ids.size and (ids.min() < 0 or ids.max() >= table.shape[0])):
        raise ShapeError("embedding", [table.shape, ids.shape], "index out of range")

    def vjp(g):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return table[ids], vjp


@primitive("softmax_cross_entropy")
def _softmax_xent(xs, gold, reduction="sum"):
    (logits,) = xs
    gold = np.asarray(gold, dtype=np.int64)
    if logits.ndim != 2 or gold.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", [logits.shape, gold.shape])
    if gold.size and (gold.min() < 0 or gold.max() >= logits.shape[1]):
        raise ValueError("softmax_cross_entropy: gold class out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(logits.shape[0])
    per_doc = -log_p[rows, gold]
    scale = 1.0 / len(gold) if reduction == "mean" else 1.0
    out = per_doc.sum() * scale if reduction in ("sum", "mean") else per_doc

    def vjp(g):
        grad = np.exp(log_p)
        grad[rows, gold] -= 1.0
        if reduction == "none":
            return (grad * g[:, None],)
        return (grad * (g * scale),)

    return out, vjp


# ---------------------------------------------------------------------------
# functional wrappers


def add(a, b):
    return apply_primitive("add", [a, b])


def sub(a, b):
    return apply_primitive("sub", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def div(a, b):
    return apply_primitive("div", [a, b])


def add_scalar(a, value):
    return apply_primitive("add_scalar", [a], {"value": float(value)})


def mul_scalar(a, value):
    return apply_primitive("mul_scalar", [a], {"value": float(value)})


def rsub_scalar(a, value):
    """``value - a``."""
    return apply_primitive("rsub_scalar", [a], {"value": float(value)})


def tanh(a):
    return apply_primitive("tanh", [a])


def sigmoid(a):
    return apply_primitive("sigmoid", [a])


def relu(a, floor: float = 0.0):
    return apply_primitive("relu", [a], {"floor": float(floor)})


def exp(a):
    return apply_primitive("exp", [a])


def log(a):
    return apply_primitive("log", [a])


def power(a, b):
    return apply_primitive("power", [a, b])


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def affine(x, w, b):
    return apply_primitive("affine", [x, w, b])


def transpose(a):
    return apply_primitive("transpose", [a])


def reshape(a, shape):
    return apply_primitive("reshape", [a], {"shape": tuple(shape)})


def concat(tensors, axis=-1):
    return apply_primitive("concat", list(tensors), {"axis": axis})


def slice_(a, axis, start, stop):
    return apply_primitive("slice", [a], {"axis": axis, "start": start, "stop": stop})


def index(a, axis, i):
    return apply_primitive("index", [a], {"axis": axis, "i": i})


def stack(tensors, axis=0):
    return apply_primitive("stack", list(tensors), {"axis": axis})


def pad(a, axis, before, after):
    return apply_primitive("pad", [a], {"axis": axis, "before": before, "after": after})


def sum_(a, axis=None):
    return apply_primitive("sum", [a], {"axis": axis})


def masked_softmax(a, mask, axis=-1):
    return apply_primitive("masked_softmax", [a], {"mask": mask, "axis": axis})


def masked_mean(a, mask, axis):
    return apply_primitive("masked_mean", [a], {"mask": mask, "axis": axis})


def weighted_sum(weights, x):
    return apply_primitive("weighted_sum", [weights, x])


def dropout(a, rate, train, rng):
    return apply_primitive("dropout", [a], {"rate": rate, "train": train, "rng": rng})


def embedding(table, ids):
    return apply_primitive("embedding", [table], {"ids": ids})


def softmax_cross_entropy(logits, gold, reduction="sum"):
    return apply_primitive("softmax_cross_entropy", [logits], {"gold": gold, "reduction": reduction})


def blend(gate, a, b):
    """Elementwise ``gate * a + (1 - gate) * b``."""
    return add(mul(gate, a), mul(rsub_scalar(gate, 1.0), b))


def dropout_rng(seed: int, step: int, layer: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, step, layer)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, step, layer])))
