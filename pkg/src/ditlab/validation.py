"""Input checking for array-facing entry points.

Latents travel as [n, I, I, C] float arrays; a flattened [n, I*I*C] layout
is accepted wherever the spatial shape is known from elsewhere.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from ditlab.errors import ShapeError


def check_latent_array(
    X,
    input_size: Optional[int] = None,
    channels: Optional[int] = None,
) -> np.ndarray:
    """Validate a batch of latents; returns float32 [n, I, I, C].

    Flattened [n, d] input is reshaped, which requires input_size and
    channels; 4-D input may instead declare them implicitly, in which case
    any sizes passed in must agree.
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        if input_size is None or channels is None:
            raise ShapeError(
                "flattened latents need explicit input_size and channels "
                "to recover [n, I, I, C]"
            )
        expected = input_size * input_size * channels
        if X.shape[1] != expected:
            raise ShapeError(
                f"flattened latents have {X.shape[1]} features, but "
                f"{input_size}x{input_size}x{channels} needs {expected}"
            )
        X = X.reshape(X.shape[0], input_size, input_size, channels)
    elif X.ndim == 4:
        n, h, w, c = X.shape
        if h != w:
            raise ShapeError(f"latents must be square, got {h}x{w}")
        if input_size is not None and h != input_size:
            raise ShapeError(f"expected input_size {input_size}, got {h}")
        if channels is not None and c != channels:
            raise ShapeError(f"expected {channels} channels, got {c}")
    else:
        raise ShapeError(
            f"latents must be [n, I, I, C] or flattened [n, d], "
            f"got shape {X.shape}"
        )
    if X.shape[0] < 1:
        raise ShapeError("need at least one latent")
    if not np.all(np.isfinite(X)):
        raise ValueError("latents contain non-finite values")
    return X


def check_labels(y, n: int, num_classes: Optional[int] = None) -> np.ndarray:
    """Validate integer class labels; returns int64 of shape [n]."""
    if y is None:
        raise ValueError("class labels are required")
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        rounded = np.asarray(y, dtype=np.int64)
        if not np.array_equal(rounded, y):
            raise ValueError("labels must be integers")
        y = rounded
    y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError(f"labels must be non-negative, got min {y.min()}")
    if num_classes is not None and y.max() >= num_classes:
        raise ValueError(
            f"labels must lie in 0..{num_classes - 1}, got max {y.max()}"
        )
    return y
