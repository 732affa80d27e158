"""Input validation helpers shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np

from .core import NumericError


def check_parts_array(X, n_parts=None, name="X") -> np.ndarray:
    """Coerce ``X`` to a float64 (n_samples, n_parts, width) array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2 and n_parts is not None and X.shape[1] % n_parts == 0:
        X = X.reshape(X.shape[0], n_parts, -1)
    if X.ndim != 3:
        raise ValueError(f"{name} must be 3-dimensional (n_samples, n_parts, width), got shape {X.shape}")
    if n_parts is not None and X.shape[1] != n_parts:
        raise ValueError(f"{name} has {X.shape[1]} parts, expected {n_parts}")
    if not np.all(np.isfinite(X)):
        raise NumericError(f"{name} contains non-finite values")
    return X


def check_vis(vis, X: np.ndarray) -> np.ndarray:
    """Visibility for ``X``; inferred from non-zero rows when not given."""
    if vis is None:
        return np.any(X != 0.0, axis=2)
    vis = np.asarray(vis, dtype=bool)
    if vis.shape != X.shape[:2]:
        raise ValueError(f"vis shape {vis.shape} does not match {X.shape[:2]}")
    return vis


def check_binary_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y).reshape(-1)
    if y.shape[0] != n_samples:
        raise ValueError(f"got {y.shape[0]} labels for {n_samples} samples")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    return y.astype(np.int64)
