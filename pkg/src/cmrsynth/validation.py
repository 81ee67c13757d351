"""Input validation helpers shared by the estimators and pipeline stages."""

from __future__ import annotations

import numpy as np

NUM_CLASSES = 4


def check_label_array(labels, num_classes=NUM_CLASSES, ndim=None, name="labels"):
    """Return ``labels`` as an integer array, raising on out-of-range class ids."""
    arr = np.asarray(labels)
    if ndim is not None and arr.ndim not in np.atleast_1d(ndim):
        raise ValueError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if arr.dtype.kind == "f":
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError(f"{name}: non-integer label values")
    elif arr.dtype.kind not in "iub":
        raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        bad = sorted(set(np.unique(arr).tolist()) - set(range(num_classes)))
        raise ValueError(f"{name}: out-of-range label value(s) {bad} for {num_classes} classes")
    return arr


def check_image_array(images, ndim=None, name="images", bounded=False):
    arr = np.asarray(images, dtype=np.float64 if np.asarray(images).dtype == np.float64 else np.float32)
    if ndim is not None and arr.ndim not in np.atleast_1d(ndim):
        raise ValueError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite values")
    if bounded and arr.size and (arr.min() < -1.0 or arr.max() > 1.0):
        raise ValueError(f"{name}: intensities must lie in [-1, 1]")
    return arr


def check_consistent_shapes(a, b, names=("images", "labels")):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {names[0]} {np.shape(a)} vs {names[1]} {np.shape(b)}")


def check_square(arr, size, name="input"):
    if arr.shape[-2:] != (size, size):
        raise ValueError(f"{name}: expected spatial size {size}x{size}, got {arr.shape[-2:]}")
