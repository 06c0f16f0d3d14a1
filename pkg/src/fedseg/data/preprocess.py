"""Resize to a fixed height, then pad or crop to a fixed canvas width."""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError


def scaled_width(h: int, w: int, target_h: int) -> int:
    return max(1, int(np.floor(w * target_h / h + 0.5)))


def _bilinear_axis(n_in: int, n_out: int):
    """Source indices and weights for half-pixel-centred linear resampling."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    r0, r1, fr = _bilinear_axis(h, out_h)
    c0, c1, fc = _bilinear_axis(w, out_w)
    rows = img[r0] * (1.0 - fr)[:, None] + img[r1] * fr[:, None]
    return rows[:, c0] * (1.0 - fc)[None, :] + rows[:, c1] * fc[None, :]


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    ri = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    ci = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return mask[np.ix_(ri, ci)]


def fit_width(arr: np.ndarray, canvas_w: int) -> np.ndarray:
    """Zero-pad on the right or centre-crop to ``canvas_w`` columns."""
    h, w = arr.shape
    if w == canvas_w:
        return arr
    if w < canvas_w:
        out = np.zeros((h, canvas_w), dtype=arr.dtype)
        out[:, :w] = arr
        return out
    left = (w - canvas_w) // 2
    return arr[:, left:left + canvas_w]


def preprocess_image(image: np.ndarray, target_h: int = 512, canvas_w: int = 1088) -> np.ndarray:
    """8-bit image -> float64 in [0, 1], shape (target_h, canvas_w)."""
    if image.ndim != 2 or min(image.shape) < 1 or target_h < 1 or canvas_w < 1:
        raise DimensionError(f"cannot preprocess image of shape {image.shape}")
    h, w = image.shape
    resized = resize_bilinear(image, target_h, scaled_width(h, w, target_h))
    return np.clip(fit_width(resized, canvas_w) / 255.0, 0.0, 1.0)


def preprocess_mask(mask: np.ndarray, target_h: int = 512, canvas_w: int = 1088) -> np.ndarray:
    """Binary mask -> float64 {0, 1}, nearest-neighbour resized, same geometry
    as :func:`preprocess_image`."""
    if mask.ndim != 2 or min(mask.shape) < 1:
        raise DimensionError(f"cannot preprocess mask of shape {mask.shape}")
    h, w = mask.shape
    resized = resize_nearest(np.asarray(mask, dtype=bool), target_h, scaled_width(h, w, target_h))
    return fit_width(resized, canvas_w).astype(np.float64)


def preprocess(image: np.ndarray, mask: np.ndarray | None = None, target_h: int = 512, canvas_w: int = 1088):
    """Preprocess an image and, optionally, its mask with identical geometry."""
    img = preprocess_image(image, target_h, canvas_w)
    if mask is None:
        return img
    return img, preprocess_mask(mask, target_h, canvas_w)


def to_arrays(samples, target_h: int, canvas_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into (N, 1, H, W) image and union-mask arrays."""
    xs = np.empty((len(samples), 1, target_h, canvas_w))
    ys = np.empty((len(samples), 1, target_h, canvas_w))
    for i, s in enumerate(samples):
        xs[i, 0], ys[i, 0] = preprocess(s.image, s.union_mask, target_h, canvas_w)
    return xs, ys
