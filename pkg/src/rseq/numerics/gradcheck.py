from __future__ import annotations

from typing import Callable

import numpy as np

from rseq.numerics.tensor import Tensor, no_grad


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, step: float = 1e-5,
                     coords=None) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` is called with a tensor that shares ``x``'s storage, so closures that
    captured ``x`` also see the perturbation. Pass ``coords`` (flat indices) to
    estimate only a subset; the other entries are left at zero.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if not (x.data.flags.c_contiguous and x.data.flags.writeable):
        x.data = x.data.copy()
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if coords is None else coords
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            hi = _scalar(f(x))
            flat[i] = orig - step
            lo = _scalar(f(x))
            flat[i] = orig
            grad[i] = (hi - lo) / (2.0 * step)
    return Tensor(grad.reshape(x.shape), dtype=np.float64)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``|a - n| / max(|a|, |n|, floor)`` over the whole vector."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)
