"""Length normalization and missing-value repair for raw series."""

from __future__ import annotations

import numpy as np


def resample_linear(x, length: int) -> np.ndarray:
    """Linearly interpolate ``x`` onto ``length`` evenly spaced points spanning it."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n == length:
        return x.copy()
    if n == 1:
        return np.repeat(x, length, axis=-1)
    grid = np.linspace(0.0, n - 1, length)
    if x.ndim == 1:
        return np.interp(grid, np.arange(n), x)
    return np.stack([np.interp(grid, np.arange(n), row) for row in x.reshape(-1, n)]).reshape(
        x.shape[:-1] + (length,)
    )


def fill_missing(x) -> np.ndarray:
    """Interpolate interior NaNs linearly; edge NaNs copy the nearest finite value."""
    x = np.array(x, dtype=np.float64)
    bad = ~np.isfinite(x)
    if not bad.any():
        return x
    good = np.flatnonzero(~bad)
    if good.size == 0:
        return np.zeros_like(x)
    x[bad] = np.interp(np.flatnonzero(bad), good, x[good])
    return x


def to_fixed_length(series, length: int) -> np.ndarray:
    """Stack variable-length series into an (n, length) array."""
    return np.stack([resample_linear(fill_missing(s), length) for s in series])
