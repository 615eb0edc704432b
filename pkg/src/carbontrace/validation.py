"""Input checks shared by the estimators and the tracing functions."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length


def check_dispatch(P, *, n_generators: int | None = None, name: str = "P") -> np.ndarray:
    """2-D finite float array of generator outputs (samples x generators)."""
    P = check_array(P, dtype=np.float64, ensure_2d=True, input_name=name)
    if n_generators is not None and P.shape[1] != n_generators:
        raise ValueError(f"{name} has {P.shape[1]} generator columns, expected {n_generators}")
    return P


def check_dispatch_loads(P, D) -> tuple[np.ndarray, np.ndarray]:
    """Validate a paired (dispatch, loads) training set."""
    P = check_dispatch(P)
    D = check_array(D, dtype=np.float64, ensure_2d=True, input_name="D")
    check_consistent_length(P, D)
    if np.any(D < 0):
        raise ValueError("loads must be non-negative")
    return P, D


def check_vector(v, size: int, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size != size:
        raise ValueError(f"{name} must be a vector of length {size}, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite")
    return v


def check_in_service(in_service, n_generators: int) -> np.ndarray:
    """Boolean mask from ``None`` (all), a mask, or a collection of 0-based indices."""
    if in_service is None:
        return np.ones(n_generators, dtype=bool)
    arr = np.asarray(in_service)
    if arr.dtype == bool:
        if arr.shape != (n_generators,):
            raise ValueError(f"in-service mask must have length {n_generators}")
        mask = arr.copy()
    else:
        mask = np.zeros(n_generators, dtype=bool)
        for g in arr.ravel():
            if not isinstance(g.item(), numbers.Integral) or not 0 <= g < n_generators:
                raise ValueError(f"invalid generator index {g!r}")
            mask[int(g)] = True
    if not mask.any():
        raise ValueError("in-service generator set is empty")
    return mask
