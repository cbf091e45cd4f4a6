"""Input validation helpers shared by the public estimator API."""

from __future__ import annotations

import numpy as np


class NotFittedError(RuntimeError):
    """Estimator method called before fit()/load()."""


def check_array(x, name: str, last_dim: int | None = None,
                ndim: int | None = None) -> np.ndarray:
    """Coerce to a finite float array with the expected trailing dimension."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim}d input, got shape {arr.shape}")
    if last_dim is not None and (arr.ndim == 0 or arr.shape[-1] != last_dim):
        raise ValueError(f"{name}: expected trailing dimension {last_dim}, "
                         f"got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def check_is_fitted(est, attr: str = "model_") -> None:
    if getattr(est, attr, None) is None:
        raise NotFittedError(
            f"{type(est).__name__} is not fitted yet; call fit() or load()")
