"""Input checks shared by the estimators and pipeline functions."""

from __future__ import annotations

import numpy as np


def check_stack(views, masks=None, n_views=None, n_channels=None):
    """Validate an ``N x C x H x W`` revisit stack and its ``N x H x W`` masks.

    Returns float32 views and boolean masks (all-true when ``masks`` is None).
    """
    views = np.asarray(views)
    if views.ndim != 4:
        raise ValueError(f"revisit stack must be N x C x H x W, got shape {views.shape}")
    if not np.issubdtype(views.dtype, np.floating):
        views = views.astype(np.float32)
    if not np.all(np.isfinite(views)):
        raise ValueError("revisit stack contains non-finite values")
    if n_views is not None and views.shape[0] != n_views:
        raise ValueError(f"expected {n_views} views, got {views.shape[0]}")
    if n_channels is not None and views.shape[1] != n_channels:
        raise ValueError(f"expected {n_channels} channels, got {views.shape[1]}")
    if masks is None:
        masks = np.ones((views.shape[0],) + views.shape[2:], dtype=bool)
    else:
        masks = np.asarray(masks).astype(bool)
        expected = (views.shape[0],) + views.shape[2:]
        if masks.shape != expected:
            raise ValueError(f"mask shape {masks.shape} does not match stack {expected}")
    return views.astype(np.float32, copy=False), masks


def check_batch(X, ndim, name="X"):
    """Coerce a batch to float32 with the given rank (a single sample is promoted)."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == ndim - 1:
        X = X[None]
    if X.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dimensions, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_labels(y, n_classes, ignore=255):
    y = np.asarray(y)
    if y.dtype != np.uint8:
        if np.any((y < 0) | (y > 255)):
            raise ValueError("labels must fit in uint8")
        y = y.astype(np.uint8)
    bad = (y != ignore) & (y >= n_classes)
    if np.any(bad):
        raise ValueError(f"label codes must be in 0..{n_classes - 1} or {ignore}")
    return y
