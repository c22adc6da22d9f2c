"""Hybrid contextualized word encoder: text-CNN features next to BiLSTM states.

All encoders take batched, right-padded inputs ``words [B, n, d]`` with a
``mask [B, n]`` of 0/1 entries and return ``[B, n, D]``.  Outputs at masked
positions are exactly zero, and a document's encoding does not depend on the
documents it is batched with.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MODES = ("hybrid", "cnn-only", "rnn-only")


class EncoderConfigError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    word_dim: int
    filter_sizes: tuple[int, ...] = (3, 5, 7)
    feature_maps: int = 50
    lstm_size: int = 75
    mode: str = "hybrid"

    def __post_init__(self):
        object.__setattr__(self, "filter_sizes", tuple(sorted(int(h) for h in self.filter_sizes)))
        if self.mode not in MODES:
            raise EncoderConfigError(f"unknown encoder mode {self.mode!r}; expected one of {MODES}")
        if self.word_dim <= 0:
            raise EncoderConfigError("word_dim must be positive")
        if self.uses_cnn:
            if not self.filter_sizes:
                raise EncoderConfigError("at least one filter size is required")
            for h in self.filter_sizes:
                if h <= 0 or h % 2 == 0:
                    raise EncoderConfigError(f"filter size {h} must be a positive odd integer")
            if self.feature_maps <= 0:
                raise EncoderConfigError("feature_maps must be positive")
        if self.uses_rnn and self.lstm_size <= 0:
            raise EncoderConfigError("lstm_size must be positive")

    @property
    def uses_cnn(self) -> bool:
        return self.mode in ("hybrid", "cnn-only")

    @property
    def uses_rnn(self) -> bool:
        return self.mode in ("hybrid", "rnn-only")

    @property
    def cnn_dim(self) -> int:
        return len(self.filter_sizes) * self.feature_maps if self.uses_cnn else 0

    @property
    def rnn_dim(self) -> int:
        return 2 * self.lstm_size if self.uses_rnn else 0

    @property
    def output_dim(self) -> int:
        return self.cnn_dim + self.rnn_dim


def glorot(rng: np.random.Generator, shape: tuple[int, int], fan_in=None, fan_out=None) -> np.ndarray:
    fan_in = shape[0] if fan_in is None else fan_in
    fan_out = shape[1] if fan_out is None else fan_out
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    d = cfg.word_dim
    if cfg.uses_cnn:
        for h in cfg.filter_sizes:
            params[f"cnn.W{h}"] = Tensor(glorot(rng, (h * d, cfg.feature_maps)), True, f"cnn.W{h}")
            params[f"cnn.b{h}"] = Tensor(np.zeros(cfg.feature_maps), True, f"cnn.b{h}")
    if cfg.uses_rnn:
        s = cfg.lstm_size
        for direction in ("fw", "bw"):
            bias = np.zeros(4 * s)
            bias[s:2 * s] = 1.0  # forget gate
            params[f"lstm.{direction}.Wx"] = Tensor(glorot(rng, (d, 4 * s)), True, f"lstm.{direction}.Wx")
            params[f"lstm.{direction}.Wh"] = Tensor(glorot(rng, (s, 4 * s)), True, f"lstm.{direction}.Wh")
            params[f"lstm.{direction}.b"] = Tensor(bias, True, f"lstm.{direction}.b")
    return params


def _check_input(words: Tensor, mask: np.ndarray) -> tuple[int, int]:
    if words.values.ndim != 3:
        raise ad.ShapeError("encoder", [words.shape], "expected [batch, length, dim]")
    batch, n, _ = words.shape
    if n == 0:
        raise EmptySequenceError("cannot encode an empty sequence")
    if mask.shape != (batch, n):
        raise ad.ShapeError("encoder", [words.shape, mask.shape], "mask must be [batch, length]")
    return batch, n


def _column(mask: np.ndarray) -> Tensor:
    return Tensor(np.asarray(mask, dtype=float)[..., None])


def cnn_encode(words: Tensor, mask: np.ndarray, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Same-length convolution for every filter size, blocks in ascending size order.

    Each side of the sequence gets ``(h - 1) / 2`` zero vectors, and masked
    (padding) positions are zeroed before the convolution so a short
    document sees exactly the zero padding it would see alone.
    """
    mask = np.asarray(mask, dtype=float)
    _, n = _check_input(words, mask)
    for h in cfg.filter_sizes:
        if h % 2 == 0:
            raise EncoderConfigError(f"filter size {h} must be odd")
    m = _column(mask)
    x = ad.mul(words, m)
    blocks = []
    for h in cfg.filter_sizes:
        half = (h - 1) // 2
        padded = ad.pad(x, axis=1, before=half, after=half) if half else x
        windows = [ad.slice_(padded, 1, j, j + n) for j in range(h)]
        stacked = ad.concat(windows, axis=-1) if h > 1 else windows[0]
        blocks.append(ad.relu(ad.affine(stacked, params[f"cnn.W{h}"], params[f"cnn.b{h}"])))
    out = ad.concat(blocks, axis=-1) if len(blocks) > 1 else blocks[0]
    return ad.mul(out, m)


def _lstm_direction(xw: Tensor, mask: np.ndarray, w_h: Tensor, size: int, reverse: bool) -> Tensor:
    batch, n, _ = xw.shape
    h = Tensor(np.zeros((batch, size)))
    c = Tensor(np.zeros((batch, size)))
    outputs: list[Tensor | None] = [None] * n
    steps = range(n - 1, -1, -1) if reverse else range(n)
    for t in steps:
        z = ad.add(ad.index(xw, 1, t), ad.matmul(h, w_h))
        i = ad.sigmoid(ad.slice_(z, -1, 0, size))
        f = ad.sigmoid(ad.slice_(z, -1, size, 2 * size))
        o = ad.sigmoid(ad.slice_(z, -1, 2 * size, 3 * size))
        g = ad.tanh(ad.slice_(z, -1, 3 * size, 4 * size))
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_new = ad.mul(o, ad.tanh(c_new))
        step_mask = mask[:, t]
        if np.all(step_mask == 1):
            h, c = h_new, c_new
            outputs[t] = h_new
        else:
            # Masked steps carry the previous state through and emit zeros.
            keep = Tensor(step_mask[:, None].astype(float))
            h = ad.blend(keep, h_new, h)
            c = ad.blend(keep, c_new, c)
            outputs[t] = ad.mul(h_new, keep)
    return ad.stack(outputs, axis=1)


def bilstm_encode(words: Tensor, mask: np.ndarray, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    mask = np.asarray(mask, dtype=float)
    _check_input(words, mask)
    s = cfg.lstm_size
    halves = []
    for direction, reverse in (("fw", False), ("bw", True)):
        xw = ad.affine(words, params[f"lstm.{direction}.Wx"], params[f"lstm.{direction}.b"])
        halves.append(_lstm_direction(xw, mask, params[f"lstm.{direction}.Wh"], s, reverse))
    return ad.concat(halves, axis=-1)


def hybrid_encode(words: Tensor, mask: np.ndarray, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Encode according to ``cfg.mode``; hybrid concatenates CNN then BiLSTM features."""
    mask = np.asarray(mask, dtype=float)
    if cfg.mode == "cnn-only":
        return cnn_encode(words, mask, params, cfg)
    if cfg.mode == "rnn-only":
        return bilstm_encode(words, mask, params, cfg)
    return ad.concat([cnn_encode(words, mask, params, cfg), bilstm_encode(words, mask, params, cfg)], axis=-1)
