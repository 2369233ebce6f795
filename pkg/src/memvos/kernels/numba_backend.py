"""numba @njit implementations of the hot kernels.

Compiled lazily on first call and cached on disk (cache=True), so the compile
cost is paid once per machine. Loop bodies mirror numpy_backend exactly; any
divergence is a bug caught by the parity tests.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def conv2d_forward(xp, w, stride):
    b, ci, hp, wp = xp.shape
    co, _, kh, kw = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    y = np.zeros((b, co, ho, wo), dtype=xp.dtype)
    for n in range(b):
        for c in range(co):
            for oy in range(ho):
                iy = oy * stride
                for ox in range(wo):
                    ix = ox * stride
                    acc = 0.0
                    for k in range(ci):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[n, k, iy + i, ix + j] * w[c, k, i, j]
                    y[n, c, oy, ox] = acc
    return y


@njit(cache=True)
def conv2d_backward_input(dy, w, stride, hp, wp):
    b, co, ho, wo = dy.shape
    _, ci, kh, kw = w.shape
    dxp = np.zeros((b, ci, hp, wp), dtype=dy.dtype)
    for n in range(b):
        for c in range(co):
            for oy in range(ho):
                iy = oy * stride
                for ox in range(wo):
                    ix = ox * stride
                    g = dy[n, c, oy, ox]
                    for k in range(ci):
                        for i in range(kh):
                            for j in range(kw):
                                dxp[n, k, iy + i, ix + j] += g * w[c, k, i, j]
    return dxp


@njit(cache=True)
def conv2d_backward_weight(xp, dy, stride, kh, kw):
    b, co, ho, wo = dy.shape
    ci = xp.shape[1]
    dw = np.zeros((co, ci, kh, kw), dtype=dy.dtype)
    for n in range(b):
        for c in range(co):
            for oy in range(ho):
                iy = oy * stride
                for ox in range(wo):
                    ix = ox * stride
                    g = dy[n, c, oy, ox]
                    for k in range(ci):
                        for i in range(kh):
                            for j in range(kw):
                                dw[c, k, i, j] += g * xp[n, k, iy + i, ix + j]
    return dw


@njit(cache=True)
def _dilate_disk_impl(mask, radius):
    h, w = mask.shape
    out = np.zeros_like(mask)
    r2 = radius * radius
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy in range(-radius, radius + 1):
                yy = y + dy
                if yy < 0 or yy >= h:
                    continue
                for dx in range(-radius, radius + 1):
                    xx = x + dx
                    if 0 <= xx < w and dy * dy + dx * dx <= r2:
                        out[yy, xx] = True
    return out


def dilate_disk(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask.copy()
    return _dilate_disk_impl(mask, radius)


@njit(cache=True)
def fill_polygon(h, w, ys, xs):
    out = np.zeros((h, w), dtype=np.uint8)
    n = len(ys)
    for r in range(h):
        py = r + 0.5
        for c in range(w):
            px = c + 0.5
            inside = False
            for i in range(n):
                y1, x1 = ys[i], xs[i]
                y2, x2 = ys[(i + 1) % n], xs[(i + 1) % n]
                if (y1 > py) != (y2 > py):
                    xc = (x2 - x1) * (py - y1) / (y2 - y1) + x1
                    if px < xc:
                        inside = not inside
            if inside:
                out[r, c] = 1
    return out


@njit(cache=True)
def fill_ellipse(h, w, cy, cx, ry, rx, theta):
    out = np.zeros((h, w), dtype=np.uint8)
    ct, st = np.cos(theta), np.sin(theta)
    for r in range(h):
        py = r + 0.5 - cy
        for c in range(w):
            px = c + 0.5 - cx
            u = px * ct + py * st
            v = -px * st + py * ct
            if (u / rx) ** 2 + (v / ry) ** 2 <= 1.0:
                out[r, c] = 1
    return out
