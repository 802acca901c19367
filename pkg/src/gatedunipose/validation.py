"""Input validation for the estimator API."""
from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .exceptions import ShapeError


def check_images(X, input_size=None) -> np.ndarray:
    """Finite float64 image batch of shape [N, 3, H, W]."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ShapeError(f"images must have shape [N, 3, H, W], got {X.shape}")
    if input_size is not None and tuple(X.shape[2:]) != tuple(input_size):
        raise ShapeError(f"images are {tuple(X.shape[2:])}, expected {tuple(input_size)}")
    return X


def check_keypoints(y, n_samples: int | None = None, joints: int | None = None) -> np.ndarray:
    """Keypoints as [N, J, 3] (x, y, visibility); [N, J, 2] input is marked fully visible."""
    y = check_array(y, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if y.ndim != 3 or y.shape[2] not in (2, 3):
        raise ShapeError(f"keypoints must have shape [N, J, 2] or [N, J, 3], got {y.shape}")
    if y.shape[2] == 2:
        y = np.concatenate([y, np.full(y.shape[:2] + (1,), 2.0)], axis=2)
    if n_samples is not None and y.shape[0] != n_samples:
        raise ShapeError(f"{y.shape[0]} keypoint sets for {n_samples} images")
    if joints is not None and y.shape[1] != joints:
        raise ShapeError(f"{y.shape[1]} joints, expected {joints}")
    return y


def check_heatmaps(H, joints: int | None = None) -> np.ndarray:
    H = check_array(H, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if H.ndim != 4:
        raise ShapeError(f"heatmaps must have shape [N, J, H, W], got {H.shape}")
    if joints is not None and H.shape[1] != joints:
        raise ShapeError(f"{H.shape[1]} heatmap channels, expected {joints}")
    return H
