"""Central finite differences for checking analytic gradients."""

import numpy as np


def finite_difference(func, x, eps=1e-5):
    """Central-difference gradient of scalar ``func`` at array ``x`` (any shape)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        fplus = func(x)
        flat[j] = orig - eps
        fminus = func(x)
        flat[j] = orig
        g[j] = (fplus - fminus) / (2 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-8) -> float:
    """max |a - n| / max(max |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric))) / scale
