"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], step: float = 1e-5,
                      indices: dict[int, np.ndarray] | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps the tensor(s) ``x`` to a scalar tensor. When ``x`` is a
    sequence every member is perturbed. ``indices`` optionally restricts the
    checked coordinates: a map from position in ``x`` to flat indices.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    out = f(*xs)
    out.backward()
    worst = 0.0
    for pos, t in enumerate(xs):
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        sel = np.arange(flat.size) if indices is None or pos not in indices else np.asarray(indices[pos])
        numeric = np.empty(len(sel))
        with no_grad():
            for n, idx in enumerate(sel):
                orig = flat[idx]
                flat[idx] = orig + step
                up = f(*xs).item()
                flat[idx] = orig - step
                down = f(*xs).item()
                flat[idx] = orig
                numeric[n] = (up - down) / (2.0 * step)
        if len(sel):
            worst = max(worst, float(relative_error(analytic[sel], numeric).max()))
    return worst
