"""Input validation for the estimator interface."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .data import tokenize
from .errors import DataError, DimensionError


def check_images(X, channels=None, size=None):
    """``[N, C, S, S]`` finite float32 array with square images."""
    try:
        X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float32)
    except ValueError as e:
        raise DataError(str(e)) from None
    if X.ndim != 4 or X.shape[2] != X.shape[3]:
        raise DimensionError(f"images must be [N, C, S, S] with square S, got shape {X.shape}")
    if channels is not None and X.shape[1] != channels:
        raise DimensionError(f"expected {channels} channels, got {X.shape[1]}")
    if size is not None and X.shape[2] != size:
        raise DimensionError(f"expected {size}x{size} images, got {X.shape[2]}x{X.shape[3]}")
    return X


def check_captions(y, text_len, n=None):
    """Token ids ``[N, text_len]`` from caption strings or an integer array."""
    if len(y) and isinstance(y[0], str):
        ids = np.stack([tokenize(c, text_len) for c in y])
    else:
        ids = np.asarray(y)
        if ids.ndim != 2 or ids.shape[1] != text_len:
            raise DimensionError(f"token ids must be [N, {text_len}], got shape {ids.shape}")
        if not np.issubdtype(ids.dtype, np.integer):
            raise DataError(f"token ids must be integers, got {ids.dtype}")
        ids = ids.astype(np.int64)
    if n is not None and ids.shape[0] != n:
        raise DimensionError(f"{ids.shape[0]} captions for {n} images")
    return ids
