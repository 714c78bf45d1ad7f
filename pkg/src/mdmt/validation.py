"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np

from .exceptions import DimensionError, DomainError


def check_volumes(X, shape=None, name: str = "X") -> np.ndarray:
    """Return ``X`` as a finite float64 array of shape (n, D, H, W)."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise DimensionError(f"{name} must have shape (n, D, H, W), got {arr.shape}")
    if len(arr) == 0:
        raise DimensionError(f"{name} contains no volumes")
    if shape is not None and tuple(arr.shape[1:]) != tuple(shape):
        raise DimensionError(f"{name} volumes have shape {arr.shape[1:]}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains NaN or infinite values")
    return arr


def check_binary_labels(y, n: int | None = None, name: str = "y") -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if n is not None and len(arr) != n:
        raise DimensionError(f"{name} has {len(arr)} entries for {n} volumes")
    if not np.all(np.isin(arr, (0, 1))):
        raise DomainError(f"{name} must contain only 0 and 1")
    return arr.astype(np.int64)


def check_masks(masks, volumes: np.ndarray, name: str = "masks") -> np.ndarray:
    """Binary masks matching ``volumes`` one to one, as float64."""
    arr = np.asarray(masks)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape != volumes.shape:
        raise DimensionError(f"{name} shape {arr.shape} does not match volumes {volumes.shape}")
    if not np.all(np.isin(arr, (0, 1))):
        raise DomainError(f"{name} must be binary")
    return arr.astype(np.float64)
