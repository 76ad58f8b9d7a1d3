"""Central finite-difference gradient checking in 64-bit precision."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, precision


def numeric_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    with precision(np.float64):
        for i, a in enumerate(arrays):
            g = np.zeros_like(a)
            flat = a.reshape(-1)
            gflat = g.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                fp = fn(*[Tensor(x) for x in arrays]).item()
                flat[j] = orig - h
                fm = fn(*[Tensor(x) for x in arrays]).item()
                flat[j] = orig
                gflat[j] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def analytic_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    with precision(np.float64):
        ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out = fn(*ts)
        grads = backward(out, params=ts)
    return [grads[t] for t in ts]


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3,
              rtol: float = 1e-3) -> tuple[bool, float]:
    """Compare analytic and numeric gradients of scalar ``fn``.

    The error is ``max|analytic - numeric| / max|numeric|`` per input; the
    worst input is returned together with the pass flag.
    """
    ana = analytic_grad(fn, arrays)
    num = numeric_grad(fn, arrays, h=h)
    worst = 0.0
    for a, n in zip(ana, num):
        scale = max(np.max(np.abs(n)), np.max(np.abs(a)), 1e-12)
        worst = max(worst, float(np.max(np.abs(a - n)) / scale))
    return worst <= rtol, worst
