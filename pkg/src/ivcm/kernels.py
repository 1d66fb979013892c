"""Compactly supported smoothing kernels (support [-1, 1])."""

import numpy as np


def epanechnikov(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)


def uniform(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, 0.5, 0.0)


def biweight(u):
    u = np.asarray(u, dtype=float)
    w = 1.0 - u * u
    return np.where(np.abs(u) <= 1.0, 0.9375 * w * w, 0.0)


KERNELS = {
    "epanechnikov": epanechnikov,
    "uniform": uniform,
    "biweight": biweight,
}


def get_kernel(name):
    try:
        return KERNELS[name]
    except KeyError:
        raise KeyError(
            f"unknown kernel {name!r}; choose from {sorted(KERNELS)}"
        ) from None
