from __future__ import annotations

from typing import Callable

import numpy as np


def sigmoid(z):
    """Logistic function, evaluated without overflow for large ``|z|``.

    Accepts scalars or arrays; for ``z < 0`` it uses ``e^z / (1 + e^z)``.
    """
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def finite_difference_gradient(fn: Callable[[np.ndarray], float], point, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    p = np.array(point, dtype=np.float64)
    grad = np.empty_like(p)
    flat_p, flat_g = p.reshape(-1), grad.reshape(-1)
    for i in range(flat_p.size):
        orig = flat_p[i]
        flat_p[i] = orig + h
        up = float(fn(p.copy()))
        flat_p[i] = orig - h
        down = float(fn(p.copy()))
        flat_p[i] = orig
        flat_g[i] = (up - down) / (2.0 * h)
    return grad
