"""Finite-difference gradient checking used by the test suite."""

import numpy as np


def numeric_gradient(f, x, eps=1e-5):
    """Central-difference gradient of scalar f at x, elementwise.

    x must be float64 for the differences to resolve; f is called
    2 * x.size times.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def fd_score(analytic, numeric, rtol=1e-5, atol=1e-8):
    """Worst |a - n| / (atol + rtol * max(|a|, |n|)) over all coordinates.

    A score <= 1 means the analytic gradient matches finite differences to
    the stated relative tolerance; the absolute guard keeps FD roundoff on
    mathematically-zero gradients from registering as failure.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    bound = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / bound))


def max_relative_error(analytic, numeric, floor=1e-6):
    """Worst-case |a - n| / max(|a|, |n|, floor) over all coordinates."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
