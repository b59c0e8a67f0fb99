"""Image resampling primitives: bilinear point sampling, separable bicubic
resize, and a small separable blur. All pure numpy, so results are
bit-reproducible across runs on the same platform.
"""

from __future__ import annotations

import numpy as np


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img`` (H, W) at fractional coordinates; callers keep points in range."""
    h, w = img.shape
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)
    fx = np.clip(xs - x0, 0.0, 1.0)
    tl = img[y0, x0]
    tr = img[y0, x1]
    bl = img[y1, x0]
    br = img[y1, x1]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return top + (bot - top) * fy


def _cubic_kernel(t: np.ndarray, a=-0.5) -> np.ndarray:
    at = np.abs(t)
    w = np.zeros_like(at)
    near = at <= 1.0
    far = (at > 1.0) & (at < 2.0)
    w[near] = (a + 2.0) * at[near] ** 3 - (a + 3.0) * at[near] ** 2 + 1.0
    w[far] = a * at[far] ** 3 - 5.0 * a * at[far] ** 2 + 8.0 * a * at[far] - 4.0 * a
    return w


def _resize_matrix(src: int, dst: int) -> np.ndarray:
    """Dense (dst, src) map realizing 1-D convolution-based cubic resize."""
    centers = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    base = np.floor(centers).astype(np.int64)
    mat = np.zeros((dst, src))
    for tap in range(-1, 3):
        idx = np.clip(base + tap, 0, src - 1)
        wgt = _cubic_kernel(centers - (base + tap))
        np.add.at(mat, (np.arange(dst), idx), wgt)
    mat /= mat.sum(axis=1, keepdims=True)
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable cubic-convolution resize of a (H, W) float image."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.astype(np.float64, copy=True)
    wy = _resize_matrix(h, out_h)
    wx = _resize_matrix(w, out_w)
    return wy @ img.astype(np.float64) @ wx.T


def _correlate1d(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(padded, len(kernel), axis=axis)
    return win @ kernel


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with a radius-3-sigma truncated kernel."""
    if sigma <= 0:
        return img.astype(np.float64, copy=True)
    r = max(1, int(np.ceil(3.0 * sigma)))
    t = np.arange(-r, r + 1)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()
    out = _correlate1d(img.astype(np.float64), k, axis=0)
    return _correlate1d(out, k, axis=1)
