"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import math

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, channels: int = 3) -> np.ndarray:
    """Return ``X`` as a uint8 array ``[n, C, H, W]``.

    Accepts a 4-d batch or a 2-d matrix of flattened square images with ``channels``
    channels (so the estimators also work after a flattening step in a pipeline).
    """
    arr = np.asarray(X)
    if arr.ndim == 2:
        n, flat = arr.shape
        side = math.isqrt(flat // channels) if flat % channels == 0 else 0
        if side == 0 or channels * side * side != flat:
            raise ValueError(f"cannot reshape {flat} features into {channels} square channels")
        arr = arr.reshape(n, channels, side, side)
    if arr.ndim != 4:
        raise ValueError(f"expected images shaped [n, C, H, W], got array of shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("no images given")
    if arr.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {arr.shape[1]}")
    if arr.dtype != np.uint8:
        if not np.all(np.isfinite(arr)):
            raise ValueError("images contain non-finite values")
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("pixel values must lie in [0, 255]")
        arr = np.rint(arr).astype(np.uint8)
    return arr


def check_labels(y, n_samples: int) -> list:
    labels = list(np.asarray(y).tolist())
    if len(labels) != n_samples:
        raise ValueError(f"{n_samples} samples but {len(labels)} labels")
    return labels


def check_embeddings(X) -> np.ndarray:
    return check_array(X, dtype=[np.float64, np.float32])
