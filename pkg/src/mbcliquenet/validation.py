"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, column_or_1d

__all__ = ["check_images", "check_labels", "check_positive_int"]


def check_images(X, image_shape=None, dtype=np.float32) -> np.ndarray:
    """Coerce ``X`` to a finite (n, c, h, w) array.

    Accepts (n, c, h, w), (n, h, w) (one channel) or flat (n, features) with
    ``image_shape`` = (c, h, w).
    """
    X = check_array(X, allow_nd=True, dtype=[np.float32, np.float64], ensure_all_finite=True)
    if X.ndim == 2:
        if image_shape is None:
            raise ValueError("flat input needs image_shape=(channels, height, width)")
        shape = tuple(int(s) for s in image_shape)
        if len(shape) != 3 or int(np.prod(shape)) != X.shape[1]:
            raise ValueError(f"image_shape {image_shape} does not fit {X.shape[1]} features")
        X = X.reshape((X.shape[0],) + shape)
    elif X.ndim == 3:
        X = X[:, None]
    elif X.ndim != 4:
        raise ValueError(f"images must be 2-, 3- or 4-dimensional, got {X.ndim} dimensions")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    return X.astype(dtype, copy=False)


def check_labels(y, n: int):
    """Return ``(classes, encoded)`` for a 1-D label vector of length ``n``."""
    y = column_or_1d(y, warn=True)
    if y.shape[0] != n:
        raise ValueError(f"{y.shape[0]} labels for {n} samples")
    classes, encoded = np.unique(y, return_inverse=True)
    if classes.size < 2:
        raise ValueError("need samples of at least two classes")
    return classes, encoded.astype(np.int64)


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
