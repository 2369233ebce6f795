"""Pure-numpy implementations of the hot kernels.

Convolutions go through im2col so the heavy lifting lands in BLAS; the
morphology and rasterization kernels are vectorized over pixels.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # xp: (B, Ci, Hp, Wp) already padded -> (B*Ho*Wo, Ci*kh*kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, ci, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, ci * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d_forward(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    b = xp.shape[0]
    co, ci, kh, kw = w.shape
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    out = cols @ w.reshape(co, ci * kh * kw).T
    return out.reshape(b, ho, wo, co).transpose(0, 3, 1, 2)


def conv2d_backward_input(dy: np.ndarray, w: np.ndarray, stride: int,
                          hp: int, wp: int) -> np.ndarray:
    b, co, ho, wo = dy.shape
    _, ci, kh, kw = w.shape
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(b * ho * wo, co)
    dcols = dy_mat @ w.reshape(co, ci * kh * kw)
    dcols = dcols.reshape(b, ho, wo, ci, kh, kw)
    dxp = np.zeros((b, ci, hp, wp), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp


def conv2d_backward_weight(xp: np.ndarray, dy: np.ndarray, stride: int,
                           kh: int, kw: int) -> np.ndarray:
    b, co, ho, wo = dy.shape
    ci = xp.shape[1]
    cols, _, _ = _im2col(xp, kh, kw, stride)
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(b * ho * wo, co)
    dw = dy_mat.T @ cols
    return dw.reshape(co, ci, kh, kw)


def dilate_disk(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a Euclidean disk of the given integer radius."""
    if radius <= 0:
        return mask.copy()
    h, w = mask.shape
    out = np.zeros_like(mask)
    r2 = radius * radius
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy * dy + dx * dx > r2:
                continue
            ys0, ys1 = max(0, -dy), min(h, h - dy)
            xs0, xs1 = max(0, -dx), min(w, w - dx)
            out[ys0:ys1, xs0:xs1] |= mask[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx]
    return out


def fill_polygon(h: int, w: int, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Rasterize a polygon: pixel (r, c) is inside iff its center (c+.5, r+.5)
    passes the even-odd crossing test against the vertex list."""
    py = np.arange(h, dtype=np.float64)[:, None] + 0.5
    px = np.arange(w, dtype=np.float64)[None, :] + 0.5
    inside = np.zeros((h, w), dtype=bool)
    n = len(ys)
    for i in range(n):
        y1, x1 = ys[i], xs[i]
        y2, x2 = ys[(i + 1) % n], xs[(i + 1) % n]
        cond = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= cond & (px < xc)
    return inside.astype(np.uint8)


def fill_ellipse(h: int, w: int, cy: float, cx: float, ry: float, rx: float,
                 theta: float) -> np.ndarray:
    py = np.arange(h, dtype=np.float64)[:, None] + 0.5 - cy
    px = np.arange(w, dtype=np.float64)[None, :] + 0.5 - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = px * ct + py * st
    v = -px * st + py * ct
    return ((u / rx) ** 2 + (v / ry) ** 2 <= 1.0).astype(np.uint8)
