"""Optimal-transport conditional flow matching: straight probability paths,
their constant target velocity, the weighted L1 training objective and Euler
sampling.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import ndgrad as nd
from .avdit import AUDIO_DIM, HEAD_DIM, ConditionBundle
from .ndgrad import ShapeMismatch


class TOutOfRange(ValueError):
    pass


class NonFiniteState(FloatingPointError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class MisalignedBatch(ValueError):
    pass


class ModelNotLoaded(RuntimeError):
    pass


@dataclass
class FlowConfig:
    sigma_min: float = 1e-6
    lambda_s: float = 3.0
    lambda_h: float = 0.2
    lambda_f: float = 1.0
    steps: int = 8
    solver: str = "euler"

    def __post_init__(self):
        if not 0.0 <= self.sigma_min < 1.0:
            raise ValueError("sigma_min must lie in [0, 1)")
        if self.steps < 1:
            raise ValueError("solver steps must be >= 1")
        if min(self.lambda_s, self.lambda_h, self.lambda_f) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.solver != "euler":
            raise ValueError(f"unsupported solver {self.solver!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- path

def _t_like(t, x: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise TOutOfRange(f"t must lie in [0, 1], got {t}")
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (x.ndim - t.ndim))


def ot_path(x0: np.ndarray, x1: np.ndarray, t, sigma_min: float = 1e-6) -> np.ndarray:
    """``(1 - (1 - sigma_min) t) x0 + t x1``; ``t`` may be per leading batch element."""
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise ShapeMismatch(f"ot_path: {x0.shape} vs {x1.shape}")
    tt = _t_like(t, x0)
    return (1.0 - (1.0 - sigma_min) * tt) * x0 + tt * x1


def target_velocity(x0: np.ndarray, x1: np.ndarray, sigma_min: float = 1e-6) -> np.ndarray:
    """Time derivative of :func:`ot_path`: ``x1 - (1 - sigma_min) x0``."""
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise ShapeMismatch(f"target_velocity: {x0.shape} vs {x1.shape}")
    return x1 - (1.0 - sigma_min) * x0


@dataclass
class PathSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    u_target: np.ndarray


def sample_path(x1: np.ndarray, rng: np.random.Generator, sigma_min: float = 1e-6) -> PathSample:
    x0 = rng.standard_normal(x1.shape)
    t = rng.random(x1.shape[0])
    return PathSample(x0, x1, t, ot_path(x0, x1, t, sigma_min), target_velocity(x0, x1, sigma_min))


# ---------------------------------------------------------------- normalization

class NormStats:
    """Per-channel z-normalization of the audio, head and face streams."""

    STREAMS = ("audio", "head", "face")

    def __init__(self, mean: dict[str, np.ndarray], std: dict[str, np.ndarray]):
        self.mean = {k: np.asarray(v, dtype=np.float64) for k, v in mean.items()}
        self.std = {k: np.maximum(np.asarray(v, dtype=np.float64), 1e-3) for k, v in std.items()}

    @classmethod
    def fit(cls, arrays: dict[str, list[np.ndarray]]) -> "NormStats":
        mean, std = {}, {}
        for k, seqs in arrays.items():
            cat = np.concatenate([np.asarray(s, dtype=np.float64).reshape(-1, s.shape[-1]) for s in seqs])
            # float32 like the checkpoint, so a resumed run sees identical data
            mean[k] = cat.mean(0).astype(np.float32).astype(np.float64)
            std[k] = cat.std(0).astype(np.float32).astype(np.float64)
        return cls(mean, std)

    def normalize(self, stream: str, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[stream]) / self.std[stream]

    def denormalize(self, stream: str, x: np.ndarray) -> np.ndarray:
        return x * self.std[stream] + self.mean[stream]

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.mean:
            out[f"norm.mean.{k}"] = self.mean[k].astype(np.float32)
            out[f"norm.std.{k}"] = self.std[k].astype(np.float32)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "NormStats":
        mean = {k[len("norm.mean."):]: v for k, v in arrays.items() if k.startswith("norm.mean.")}
        std = {k[len("norm.std."):]: v for k, v in arrays.items() if k.startswith("norm.std.")}
        if set(mean) != set(std) or not mean:
            raise ModelNotLoaded("checkpoint has no normalization statistics")
        return cls(mean, std)


# ---------------------------------------------------------------- objective

@dataclass
class Batch:
    """A normalized training batch; all arrays are ``(B, n, C)``."""

    tokens: np.ndarray
    S: np.ndarray
    H: np.ndarray
    F: np.ndarray
    participant_features: np.ndarray | None = None
    participant_tokens: np.ndarray | None = None
    audio_context: np.ndarray | None = None

    def condition(self) -> ConditionBundle:
        return ConditionBundle(self.tokens, self.participant_features, self.participant_tokens,
                               self.audio_context)


def cfm_loss(model, batch: Batch, flowcfg: FlowConfig, rng: np.random.Generator):
    """Weighted L1 conditional flow-matching loss.

    Draws one ``t ~ U[0, 1]`` and one joint noise sample per sequence, shared
    by both streams.  Returns ``(loss, {"total", "L_s", "L_h", "L_f"})``.
    """
    b, n = batch.tokens.shape[:2]
    for name in ("S", "H", "F", "participant_features", "participant_tokens", "audio_context"):
        arr = getattr(batch, name)
        if arr is not None and arr.shape[:2] != (b, n):
            raise MisalignedBatch(f"{name} has frames {arr.shape[:2]}, tokens {(b, n)}")
    x1 = np.concatenate([batch.S, batch.H, batch.F], axis=-1)
    x0 = rng.standard_normal(x1.shape)
    t = rng.random(b)
    xt = ot_path(x0, x1, t, flowcfg.sigma_min)
    u = target_velocity(x0, x1, flowcfg.sigma_min)
    a_w, h_w = batch.S.shape[-1], batch.H.shape[-1]
    va, vv = model(xt[..., :a_w], xt[..., a_w:], t, batch.condition())
    l_s = nd.l1_loss(va, nd.constant(u[..., :a_w]))
    l_h = nd.l1_loss(nd.slice(vv, 0, h_w), nd.constant(u[..., a_w:a_w + h_w]))
    l_f = nd.l1_loss(nd.slice(vv, h_w, vv.shape[-1]), nd.constant(u[..., a_w + h_w:]))
    loss = l_s * flowcfg.lambda_s + l_h * flowcfg.lambda_h + l_f * flowcfg.lambda_f
    total = loss.item()
    if not np.isfinite(total):
        raise NonFiniteLoss(f"loss is {total}")
    return loss, {"total": total, "L_s": l_s.item(), "L_h": l_h.item(), "L_f": l_f.item()}


# ---------------------------------------------------------------- solvers

def _map(fn, *xs):
    if isinstance(xs[0], tuple):
        return tuple(fn(*parts) for parts in zip(*xs))
    return fn(*xs)


def _finite(x) -> bool:
    if isinstance(x, tuple):
        return all(np.isfinite(p).all() for p in x)
    return bool(np.isfinite(x).all())


def euler_solve(v: Callable, x0, steps: int):
    """Integrate ``dx/dt = v(t, x)`` from 0 to 1 with uniform Euler steps.

    ``x0`` may be an array or a tuple of arrays (``v`` then returns a tuple).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    h = 1.0 / steps
    x = x0
    for k in range(steps):
        dx = v(k / steps, x)
        x = _map(lambda a, d: a + h * d, x, dx)
        if not _finite(x):
            raise NonFiniteState(f"state became non-finite at step {k + 1}")
    return x


def midpoint_solve(v: Callable, x0, steps: int):
    """Second-order reference solver (explicit midpoint)."""
    h = 1.0 / steps
    x = x0
    for k in range(steps):
        t = k / steps
        mid = _map(lambda a, d: a + 0.5 * h * d, x, v(t, x))
        x = _map(lambda a, d: a + h * d, x, v(t + 0.5 * h, mid))
    return x


def sample(model, tokens: np.ndarray, flowcfg: FlowConfig, rng: np.random.Generator,
           participant_features=None, participant_tokens=None, norm: NormStats | None = None,
           steps: int | None = None):
    """Generate ``(S, H, F)`` for a token sequence by integrating the learned field.

    ``tokens`` is ``(n, 29)`` or ``(B, n, 29)``.  When ``norm`` is given the
    outputs are mapped back to data units.
    """
    if model is None or not getattr(model, "params", True):
        raise ModelNotLoaded("no trained model")
    single = tokens.ndim == 2
    if single:
        tokens = tokens[None]
        participant_features = None if participant_features is None else participant_features[None]
        participant_tokens = None if participant_tokens is None else participant_tokens[None]
    b, n = tokens.shape[:2]
    vdim = model.config.vision_dim
    steps = flowcfg.steps if steps is None else steps
    x0 = rng.standard_normal((b, n, AUDIO_DIM + vdim))
    xa0, xv0 = x0[..., :AUDIO_DIM], x0[..., AUDIO_DIM:]
    cond = ConditionBundle(tokens, participant_features, participant_tokens)
    with nd.no_grad():
        if getattr(model, "variant", None) == "cascaded":
            dummy = np.zeros_like(xv0)
            cond.audio_context = np.zeros((b, n, AUDIO_DIM))
            s = euler_solve(lambda t, x: model(x, dummy, t, cond)[0].data.astype(np.float64), xa0, steps)
            cond.audio_context = s
            v = euler_solve(lambda t, x: model(s, x, t, cond)[1].data.astype(np.float64), xv0, steps)
        else:
            def field(t, state):
                va, vv = model(state[0], state[1], t, cond)
                return va.data.astype(np.float64), vv.data.astype(np.float64)

            s, v = euler_solve(field, (xa0, xv0), steps)
    h, f = v[..., :HEAD_DIM], v[..., HEAD_DIM:]
    if norm is not None:
        s = norm.denormalize("audio", s)
        h = norm.denormalize("head", h)
        f = norm.denormalize("face", f)
    if single:
        return s[0], h[0], f[0]
    return s, h, f
