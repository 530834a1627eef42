"""Turning patch-grid anomaly scores into pixel maps and image scores."""

from __future__ import annotations

import numpy as np

from .types import NumericalError, RetrievalParams, ValidationError, as_float64


def upsample_map(grid_scores: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear upsample of a patch-grid score map to pixel resolution.

    Cell centers align: output pixel (r, c) samples grid coordinate
    ((r + 0.5) * gh / H - 0.5, (c + 0.5) * gw / W - 0.5), with coordinates
    clamped to the grid so borders replicate edge cells. Interpolation is
    nested lerp, so a constant grid yields an exactly constant map; the
    result is clipped to [0, 1].
    """
    g = as_float64(grid_scores)
    if g.ndim != 2 or g.size == 0:
        raise ValidationError(f"grid scores must be a non-empty 2-D array, got {g.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericalError("grid scores contain non-finite values")
    if g.min() < 0.0 or g.max() > 1.0:
        raise ValidationError("grid scores must lie in [0, 1]")
    h, w = target_hw
    if h < 1 or w < 1:
        raise ValidationError(f"target size must be positive, got {target_hw}")
    gh, gw = g.shape

    ys = np.clip((np.arange(h) + 0.5) * (gh / h) - 0.5, 0.0, gh - 1.0)
    xs = np.clip((np.arange(w) + 0.5) * (gw / w) - 0.5, 0.0, gw - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]

    top = g[np.ix_(y0, x0)]
    top = top + wx * (g[np.ix_(y0, x1)] - top)
    bot = g[np.ix_(y1, x0)]
    bot = bot + wx * (g[np.ix_(y1, x1)] - bot)
    out = top + wy * (bot - top)
    return np.clip(out, 0.0, 1.0)


def k_from_fraction(n_pixels: int, fraction: float) -> int:
    """Pool size for top-k averaging: max(1, round(fraction * n_pixels))."""
    if n_pixels < 1:
        raise ValidationError(f"pixel count must be positive, got {n_pixels}")
    return max(1, int(round(fraction * n_pixels)))


def topk_mean(anomaly_map: np.ndarray, k: int) -> float:
    """Mean of the k largest values in the map."""
    flat = as_float64(anomaly_map).ravel()
    if not 1 <= k <= flat.size:
        raise ValidationError(f"k={k} out of range for {flat.size} values")
    if not np.all(np.isfinite(flat)):
        raise NumericalError("anomaly map contains non-finite values")
    return float(np.partition(flat, flat.size - k)[flat.size - k :].mean())


def image_score(y_cls: np.ndarray, anomaly_map: np.ndarray, params: RetrievalParams) -> float:
    """Image anomaly score: image-level anomaly posterior plus the top-k
    mean of the pixel map. Lies in [0, 2]."""
    y_cls = as_float64(y_cls)
    if y_cls.shape != (2,):
        raise ValidationError(f"image posterior must have shape (2,), got {y_cls.shape}")
    k = k_from_fraction(anomaly_map.size, params.topk_fraction)
    return float(y_cls[1]) + topk_mean(anomaly_map, k)


def image_score_pixel_only(anomaly_map: np.ndarray, params: RetrievalParams) -> float:
    """Top-k mean of the pixel map alone (no image-level term)."""
    k = k_from_fraction(anomaly_map.size, params.topk_fraction)
    return topk_mean(anomaly_map, k)


def smooth_map(anomaly_map: np.ndarray, sigma: float) -> np.ndarray:
    """Optional Gaussian smoothing of a pixel map, clipped back to [0, 1].

    sigma <= 0 returns the input unchanged (as float64).
    """
    m = as_float64(anomaly_map)
    if sigma <= 0:
        return m
    from scipy.ndimage import gaussian_filter

    return np.clip(gaussian_filter(m, sigma=sigma, mode="nearest"), 0.0, 1.0)
