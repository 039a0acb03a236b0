"""Central finite-difference gradient checking.

The numeric side perturbs raw arrays and re-runs the forward function, so it
is independent of the backward rules it verifies. All checks assume float64.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward, reset_tape

DEFAULT_H = 1e-6
REL_TOL = 1e-5
ABS_TOL = 1e-8


def numeric_grad(f, x: np.ndarray, h: float = DEFAULT_H) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst elementwise relative error, with an absolute fallback near zero."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.where(diff <= ABS_TOL, 0.0, diff / np.maximum(scale, ABS_TOL))
    return float(err.max()) if err.size else 0.0


def check_gradients(forward, arrays: dict, h: float = DEFAULT_H) -> float:
    """Compare analytic and numeric gradients of ``forward``.

    ``forward`` maps a dict of Tensors (built from ``arrays``) to a scalar
    Tensor. Returns the worst relative error over every array.
    """
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    reset_tape()
    loss = forward(tensors)
    backward(loss)
    analytic = {
        k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.values))
        for k, t in tensors.items()
    }
    reset_tape()

    worst = 0.0
    for key, base in arrays.items():
        work = base.copy()

        def run(arr, key=key):
            vals = {k: (arr if k == key else arrays[k]) for k in arrays}
            ts = {k: Tensor(v) for k, v in vals.items()}
            out = float(forward(ts).values)
            reset_tape()
            return out

        num = numeric_grad(run, work, h=h)
        worst = max(worst, max_error(analytic[key], num))
    return worst
