"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NdgradError, Tensor


class StateMismatch(NdgradError, ValueError):
    pass


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
               lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9,
               weight_decay: float = 0.0) -> tuple[dict[str, np.ndarray], AdamState]:
    """One AdamW update.  Inputs are left untouched; new arrays are returned.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    if set(state.m) != set(params) or set(state.v) != set(params):
        raise StateMismatch("optimizer state does not cover the same parameters")
    step = state.step + 1
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape or v.shape != p.shape:
            raise StateMismatch(f"state for {name!r} has shape {m.shape}, parameter {p.shape}")
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        upd = (m / bc1) / (np.sqrt(v / bc2) + eps)
        q = p * (1.0 - lr * weight_decay) if weight_decay else p
        new_p[name] = (q - lr * upd).astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return new_p, AdamState(step, new_m, new_v)


class AdamW:
    """Stateful wrapper that updates a ``name -> Tensor`` parameter dict in place."""

    def __init__(self, params: dict[str, Tensor], lr=1e-4, betas=(0.9, 0.98), eps=1e-9,
                 weight_decay=0.0, clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.state = AdamState.zeros_like({k: t.data for k, t in params.items()})

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> float:
        """Apply one update; returns the pre-clipping global gradient norm."""
        norm = float(np.sqrt(np.sum([np.sum(np.square(g, dtype=np.float64)) for g in grads.values()])))
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
            grads = {k: (g * scale).astype(g.dtype) for k, g in grads.items()}
        new, self.state = adamw_step({k: t.data for k, t in self.params.items()}, grads, self.state,
                                     lr=self.lr if lr is None else lr, beta1=self.betas[0],
                                     beta2=self.betas[1], eps=self.eps,
                                     weight_decay=self.weight_decay)
        for k, t in self.params.items():
            t.data = new[k]
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array([self.state.step], dtype=np.float32)}
        for k in self.params:
            out[f"opt.m.{k}"] = self.state.m[k]
            out[f"opt.v.{k}"] = self.state.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        try:
            m = {k: np.asarray(arrays[f"opt.m.{k}"]) for k in self.params}
            v = {k: np.asarray(arrays[f"opt.v.{k}"]) for k in self.params}
            step = int(arrays["opt.step"][0])
        except KeyError as exc:
            raise StateMismatch(f"checkpoint lacks optimizer entry {exc}") from None
        self.state = AdamState(step, m, v)
