"""Input validation helpers for arrays entering the public API."""

from __future__ import annotations

import numpy as np


def as_images(X, name: str = "X") -> np.ndarray:
    """Coerce input to an (n, channels, height, width) float array.

    A 3-D input (n, height, width) is treated as single-channel.
    """
    arr = np.asarray(X)
    if not np.issubdtype(arr.dtype, np.number):
        raise TypeError(f"{name} must be numeric, got dtype {arr.dtype}")
    if arr.ndim == 3:
        arr = arr[:, None, :, :]
    if arr.ndim != 4:
        raise ValueError(
            f"{name} must have shape (n, channels, height, width) or "
            f"(n, height, width), got {arr.shape}"
        )
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


def as_image(x, name: str = "x") -> np.ndarray:
    """Coerce a single image to (channels, height, width)."""
    arr = np.asarray(x)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    if arr.ndim != 3:
        raise ValueError(
            f"{name} must have shape (channels, height, width) or "
            f"(height, width), got {arr.shape}"
        )
    return arr


def check_labels(y, n: int | None = None, d2: int | None = None,
                 name: str = "y") -> np.ndarray:
    """Validate integer class labels; returns an int64 array."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        rounded = np.rint(np.asarray(arr, dtype=np.float64))
        if arr.size and not np.array_equal(rounded, np.asarray(arr, dtype=np.float64)):
            raise ValueError(f"{name} must contain integer class labels")
        arr = rounded
    arr = arr.astype(np.int64)
    if n is not None and len(arr) != n:
        raise ValueError(f"{name} has {len(arr)} entries, expected {n}")
    if arr.size and arr.min() < 0:
        raise ValueError(f"{name} contains negative labels")
    if d2 is not None and arr.size and arr.max() >= d2:
        raise ValueError(f"{name} contains label {arr.max()} >= d2 = {d2}")
    return arr


def check_matrix(Z, d: int | None = None, name: str = "Z") -> np.ndarray:
    """Validate a 2-D float matrix, optionally with a fixed column count."""
    arr = np.asarray(Z, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if d is not None and arr.shape[1] != d:
        raise ValueError(f"{name} has {arr.shape[1]} columns, expected {d}")
    return arr
