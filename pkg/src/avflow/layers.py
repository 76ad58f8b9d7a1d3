"""Transformer building blocks shared by the DiT stacks, the head VAE and the
text-to-tokens projector.

Parameters live in flat ``dict[str, Tensor]`` maps under dotted names so a
model's checkpoint is just that dict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

Params = dict  # str -> Tensor


class OddHeadDim(ValueError):
    pass


# ---------------------------------------------------------------- init helpers

def init_linear(params: Params, name: str, fan_in: int, fan_out: int, rng: np.random.Generator,
                scale: float = 1.0) -> None:
    std = scale / math.sqrt(fan_in)
    params[f"{name}.w"] = nd.tensor(rng.standard_normal((fan_in, fan_out)) * std, requires_grad=True,
                                    name=f"{name}.w")
    params[f"{name}.b"] = nd.tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")


def linear(params: Params, name: str, x: Tensor) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def init_norm(params: Params, name: str, d: int) -> None:
    params[f"{name}.g"] = nd.tensor(np.ones(d), requires_grad=True, name=f"{name}.g")
    params[f"{name}.b"] = nd.tensor(np.zeros(d), requires_grad=True, name=f"{name}.b")


def norm(params: Params, name: str, x: Tensor) -> Tensor:
    return nd.layernorm(x) * params[f"{name}.g"] + params[f"{name}.b"]


# ---------------------------------------------------------------- positions and masks

def window_mask(n: int, window: int, lookahead: int) -> np.ndarray:
    """Dense ``(n, n)`` boolean mask: frame ``i`` sees ``[i-(window-1-lookahead), i+lookahead]``."""
    if window < 1:
        raise ValueError("window must be >= 1")
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    return (j >= i - (window - 1 - lookahead)) & (j <= i + lookahead)


def band_offsets(window: int, lookahead: int) -> np.ndarray:
    return np.arange(-(window - 1 - lookahead), lookahead + 1)


@dataclass(frozen=True)
class Band:
    """Compact form of :func:`window_mask`: each query sees ``len(offsets)`` keys."""

    offsets: np.ndarray

    @classmethod
    def from_window(cls, window: int, lookahead: int) -> "Band":
        if lookahead >= window:
            raise ValueError("lookahead must be smaller than the window")
        return cls(band_offsets(window, lookahead))

    @classmethod
    def symmetric(cls, radius: int) -> "Band":
        return cls(np.arange(-radius, radius + 1))

    def mask(self, n: int) -> np.ndarray:
        """``(n, len(offsets))`` validity of each banded key."""
        pos = np.arange(n)[:, None] + self.offsets[None, :]
        return (pos >= 0) & (pos < n)


def rotary_tables(n: int, head_dim: int, base: float = 10000.0):
    if head_dim % 2:
        raise OddHeadDim(f"rotary embedding needs an even head dimension, got {head_dim}")
    inv = base ** (-np.arange(0, head_dim, 2) / head_dim)
    ang = np.arange(n)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def rotary_embed(x: Tensor, positions=None) -> Tensor:
    """Apply rotary position embedding to ``(..., n, d_head)``."""
    n, dh = x.shape[-2], x.shape[-1]
    if dh % 2:
        raise OddHeadDim(f"rotary embedding needs an even head dimension, got {dh}")
    if positions is None:
        cos, sin = rotary_tables(n, dh)
    else:
        inv = 10000.0 ** (-np.arange(0, dh, 2) / dh)
        ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
        cos, sin = np.cos(ang), np.sin(ang)
    return nd.rotary(x, cos, sin)


def time_features(t: np.ndarray, dim: int = 32, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of flow time ``t`` in [0, 1]; shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = (t * 1000.0)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


# ---------------------------------------------------------------- attention

def init_attention(params: Params, name: str, d: int, rng) -> None:
    for w in ("q", "k", "v", "o"):
        std = 1.0 / math.sqrt(d)
        params[f"{name}.w{w}"] = nd.tensor(rng.standard_normal((d, d)) * std, requires_grad=True,
                                           name=f"{name}.w{w}")
        params[f"{name}.b{w}"] = nd.tensor(np.zeros(d), requires_grad=True, name=f"{name}.b{w}")


def _heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def band_attention(params: Params, name: str, x: Tensor, heads: int, band: Band) -> Tensor:
    """Multi-head self-attention restricted to a band of relative offsets, with rotary positions."""
    b, n, d = x.shape
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    cos, sin = rotary_tables(n, dh)
    q = nd.rotary(_heads(x @ params[f"{name}.wq"] + params[f"{name}.bq"], heads), cos, sin)
    k = nd.rotary(_heads(x @ params[f"{name}.wk"] + params[f"{name}.bk"], heads), cos, sin)
    v = _heads(x @ params[f"{name}.wv"] + params[f"{name}.bv"], heads)
    scores = nd.band_scores(q, k, band.offsets)
    p = nd.softmax(scores * (1.0 / math.sqrt(dh)), mask=band.mask(n))
    o = nd.band_mix(p, v, band.offsets)
    o = o.transpose(0, 2, 1, 3).reshape(b, n, d)
    return o @ params[f"{name}.wo"] + params[f"{name}.bo"]


def dense_attention_reference(params: Params, name: str, x: np.ndarray, heads: int,
                              mask: np.ndarray) -> np.ndarray:
    """Plain numpy ``n x n`` masked attention; the oracle for :func:`band_attention`."""
    p = {k: v.data.astype(np.float64) for k, v in params.items() if k.startswith(name)}
    b, n, d = x.shape
    dh = d // heads
    cos, sin = rotary_tables(n, dh)

    def heads_of(z):
        return z.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    def rot(z):
        out = np.empty_like(z)
        out[..., 0::2] = z[..., 0::2] * cos - z[..., 1::2] * sin
        out[..., 1::2] = z[..., 0::2] * sin + z[..., 1::2] * cos
        return out

    q = rot(heads_of(x @ p[f"{name}.wq"] + p[f"{name}.bq"]))
    k = rot(heads_of(x @ p[f"{name}.wk"] + p[f"{name}.bk"]))
    v = heads_of(x @ p[f"{name}.wv"] + p[f"{name}.bv"])
    s = q @ np.swapaxes(k, -1, -2) / math.sqrt(dh)
    s = np.where(mask, s, -np.inf)
    s = np.exp(s - s.max(-1, keepdims=True))
    s /= s.sum(-1, keepdims=True)
    o = (s @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return o @ p[f"{name}.wo"] + p[f"{name}.bo"]


# ---------------------------------------------------------------- transformer block

def init_block(params: Params, name: str, d: int, hidden: int, rng) -> None:
    init_norm(params, f"{name}.ln1", d)
    init_attention(params, f"{name}.attn", d, rng)
    init_norm(params, f"{name}.ln2", d)
    init_linear(params, f"{name}.mlp.fc1", d, hidden, rng)
    init_linear(params, f"{name}.mlp.fc2", hidden, d, rng)


def block(params: Params, name: str, x: Tensor, heads: int, band: Band) -> Tensor:
    """Pre-norm transformer block: banded self-attention then a GELU MLP."""
    x = x + band_attention(params, f"{name}.attn", norm(params, f"{name}.ln1", x), heads, band)
    h = nd.gelu(linear(params, f"{name}.mlp.fc1", norm(params, f"{name}.ln2", x)))
    return x + linear(params, f"{name}.mlp.fc2", h)


def block_param_count(d: int, hidden: int) -> int:
    return 2 * 2 * d + 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d)


def param_arrays(params: Params) -> dict[str, np.ndarray]:
    return {k: t.data for k, t in params.items()}


def load_param_arrays(params: Params, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    for k, t in params.items():
        key = prefix + k
        if key not in arrays:
            raise KeyError(f"checkpoint is missing parameter {key!r}")
        if arrays[key].shape != t.shape:
            raise ValueError(f"parameter {key!r}: checkpoint shape {arrays[key].shape}, model {t.shape}")
        t.data = np.asarray(arrays[key], dtype=t.data.dtype)
