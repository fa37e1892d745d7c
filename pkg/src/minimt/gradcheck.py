"""Central finite differences, kept independent of the tape machinery."""
import numpy as np


def numerical_gradient(f, array, eps=1e-5, indices=None):
    """Estimate d f() / d array by central differences, perturbing in place.

    ``f`` takes no arguments and returns a float computed from ``array``'s
    current contents. ``indices`` restricts the estimate to a subset of flat
    positions; the other entries of the result stay NaN.
    """
    flat = array.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * eps)
    return grad.reshape(array.shape)


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def normwise_relative_error(analytic, numeric):
    """||a - n|| / max(||a||, ||n||); zero when both vanish."""
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if denom == 0.0 else float(np.linalg.norm(analytic - numeric) / denom)
