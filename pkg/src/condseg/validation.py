"""Input checks for the estimator API, in the spirit of sklearn's check_array."""

from __future__ import annotations

import numpy as np

from .errors import MetadataError, ShapeError, ValidationError


def check_images(X, dtype=np.float32) -> np.ndarray:
    """Return images as a finite (N, C, H, W) array; (N, H, W) gains C=1."""
    X = np.asarray(X)
    if X.dtype == object:
        raise ValidationError("images must be a numeric array")
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ShapeError(f"images must be (N, H, W) or (N, C, H, W), got shape {X.shape}", dim="rank")
    if len(X) == 0:
        raise ValidationError("got an empty image batch")
    X = X.astype(dtype, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValidationError("images contain NaN or infinite values")
    return X


def check_masks(y, X: np.ndarray) -> np.ndarray:
    """Binary (N, K, H, W) masks aligned with ``X``; (N, H, W) gains K=1."""
    y = np.asarray(y)
    if y.ndim == 3:
        y = y[:, None]
    if y.ndim != 4:
        raise ShapeError(f"masks must be (N, H, W) or (N, K, H, W), got shape {y.shape}", dim="rank")
    if len(y) != len(X):
        raise ShapeError(f"{len(y)} masks for {len(X)} images", dim="N")
    if y.shape[2:] != X.shape[2:]:
        raise ShapeError(f"mask size {y.shape[2:]} != image size {X.shape[2:]}", dim="H")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("masks must be binary (0/1)")
    return y.astype(np.float32, copy=False)


def check_meta(meta, n: int, required: bool, width: int | None = None) -> np.ndarray | None:
    """Validate an (N, M) metadata matrix, or its absence."""
    if meta is None:
        if required:
            raise MetadataError("this model needs metadata")
        return None
    if not required:
        raise MetadataError("this model takes no metadata")
    meta = np.asarray(meta, dtype=np.float64)
    if meta.ndim == 1:
        meta = meta[:, None]
    if meta.ndim != 2 or len(meta) != n:
        raise MetadataError(f"metadata must be ({n}, M), got shape {meta.shape}")
    if width is not None and meta.shape[1] != width:
        raise MetadataError(f"metadata width {meta.shape[1]} != expected {width}")
    if not np.all(np.isfinite(meta)):
        raise MetadataError("metadata contains NaN or infinite values")
    return meta
