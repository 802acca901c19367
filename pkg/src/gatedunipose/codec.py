"""Gaussian heatmap targets and sub-pixel heatmap decoding.

Pixel/cell alignment is shared by both directions: a pixel coordinate ``p``
sits at cell coordinate ``(p + 0.5) / stride - 0.5``, so cell centres map to
pixel centres of the cell's footprint.
"""
from __future__ import annotations

import numpy as np

from .exceptions import ShapeError

DEFAULT_SIGMA = 2.0
DEFAULT_STRIDE = 4


def pixel_to_cell(p, stride=DEFAULT_STRIDE):
    return (np.asarray(p, dtype=np.float64) + 0.5) / stride - 0.5


def cell_to_pixel(c, stride=DEFAULT_STRIDE):
    return (np.asarray(c, dtype=np.float64) + 0.5) * stride - 0.5


def encode_gaussian(keypoints, shape, sigma: float = DEFAULT_SIGMA, stride: int = DEFAULT_STRIDE) -> np.ndarray:
    """Render one unnormalised Gaussian (peak 1) per visible joint.

    Args:
        keypoints: array-like of shape [J, 3] with (x_px, y_px, visibility).
        shape: heatmap extents (H, W).
        sigma: Gaussian width in heatmap cells.

    Returns:
        float64 array of shape [J, H, W]; joints with visibility 0 give zeros.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    kps = np.asarray(keypoints, dtype=np.float64)
    if kps.ndim != 2 or kps.shape[1] != 3:
        raise ShapeError(f"keypoints must be [J, 3], got {kps.shape}")
    h, w = shape
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    out = np.zeros((kps.shape[0], h, w))
    for j, (px, py, v) in enumerate(kps):
        if v <= 0:
            continue
        cx, cy = pixel_to_cell(px, stride), pixel_to_cell(py, stride)
        out[j] = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma ** 2))
    return out


def encode_batch(keypoints, shape, sigma=DEFAULT_SIGMA, stride=DEFAULT_STRIDE) -> np.ndarray:
    return np.stack([encode_gaussian(k, shape, sigma, stride) for k in keypoints])


def _refine(lo, mid, hi, method):
    if method == "quarter":
        return 0.25 * np.sign(hi - lo)
    denom = 2.0 * mid - lo - hi
    if denom <= 0:
        return 0.25 * np.sign(hi - lo)
    return float(np.clip(0.5 * (hi - lo) / denom, -0.5, 0.5))


def decode_keypoints(heatmaps, stride: int = DEFAULT_STRIDE, refine: str = "parabolic",
                     min_confidence: float = 0.0) -> np.ndarray:
    """Argmax decode with sub-cell refinement.

    Ties in the argmax go to the smallest row-major index. Refinement uses the
    two axis neighbours of the peak (skipped at borders): ``"parabolic"`` fits a
    parabola through the three samples, ``"quarter"`` shifts a quarter cell
    toward the larger neighbour.

    Returns:
        [J, 4] array of (x_px, y_px, confidence, low_confidence_flag).
    """
    if refine not in ("parabolic", "quarter"):
        raise ValueError(f"unknown refinement {refine!r}")
    hm = np.asarray(heatmaps, dtype=np.float64)
    if hm.ndim != 3:
        raise ShapeError(f"heatmaps must be [J, H, W], got {hm.shape}")
    n_joints, h, w = hm.shape
    out = np.zeros((n_joints, 4))
    for j in range(n_joints):
        flat = int(np.argmax(hm[j]))
        r, c = divmod(flat, w)
        peak = hm[j, r, c]
        x, y = float(c), float(r)
        if 0 < c < w - 1:
            x += _refine(hm[j, r, c - 1], peak, hm[j, r, c + 1], refine)
        if 0 < r < h - 1:
            y += _refine(hm[j, r - 1, c], peak, hm[j, r + 1, c], refine)
        out[j, 0] = cell_to_pixel(x, stride)
        out[j, 1] = cell_to_pixel(y, stride)
        out[j, 2] = peak
        out[j, 3] = float(peak <= min_confidence)
    return out


def decode_batch(heatmaps, stride=DEFAULT_STRIDE, refine="parabolic") -> np.ndarray:
    return np.stack([decode_keypoints(h, stride, refine) for h in heatmaps])
