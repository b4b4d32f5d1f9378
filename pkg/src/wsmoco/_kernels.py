"""Per-pixel image kernels with a numba path and a vectorized numpy path.

The numba path is used when numba imports cleanly and ``WSMOCO_NUMBA`` is not
set to ``0``.  Both paths implement the same arithmetic; tests check they agree
to float32 round-off.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency; the numpy path still works
    _HAVE_NUMBA = False


def numba_enabled() -> bool:
    return _HAVE_NUMBA and os.environ.get("WSMOCO_NUMBA", "1") != "0"


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _ellipse_alpha_np(h, w, cx, cy, ax, by, theta, softness):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xs = xs + 0.5 - cx
    ys = ys + 0.5 - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (c * xs + s * ys) / ax
    v = (-s * xs + c * ys) / by
    d = np.sqrt(u * u + v * v)
    return np.clip((1.0 - d) * min(ax, by) / softness + 0.5, 0.0, 1.0)


def paint_ellipse_np(canvas, cx, cy, ax, by, theta, color, softness=1.0):
    alpha = _ellipse_alpha_np(canvas.shape[0], canvas.shape[1], cx, cy, ax, by, theta, softness)
    alpha = alpha[..., None].astype(canvas.dtype)
    col = np.asarray(color, dtype=canvas.dtype)
    canvas *= 1 - alpha
    canvas += alpha * col
    return canvas


def rgb_to_hsv_np(img):
    img = np.asarray(img, dtype=np.float32)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    v = maxc
    delta = maxc - minc
    safe_max = np.where(maxc > 0, maxc, 1.0)
    s = np.where(maxc > 0, delta / safe_max, 0.0)
    safe_delta = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe_delta
    gc = (maxc - g) / safe_delta
    bc = (maxc - b) / safe_delta
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1).astype(np.float32)


def hsv_to_rgb_np(hsv):
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1).astype(np.float32)


def shift_hue_np(img, delta):
    hsv = rgb_to_hsv_np(img)
    hsv[..., 0] = (hsv[..., 0] + np.float32(delta)) % 1.0
    return hsv_to_rgb_np(hsv)


def warp_bilinear_np(img, inv, out_h, out_w):
    """Sample ``img`` at ``inv @ [x, y, 1]`` for every output pixel centre."""
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    xs += 0.5
    ys += 0.5
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2] - 0.5
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2] - 0.5
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(sx).astype(np.int64), w - 2) if w > 1 else np.zeros_like(sx, dtype=np.int64)
    y0 = np.minimum(np.floor(sy).astype(np.int64), h - 2) if h > 1 else np.zeros_like(sy, dtype=np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    src = img.astype(np.float64)
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _paint_ellipse_nb(canvas, cx, cy, ax, by, theta, color, softness):
        h, w, ch = canvas.shape
        c = np.cos(theta)
        s = np.sin(theta)
        m = min(ax, by)
        for yi in range(h):
            y = yi + 0.5 - cy
            for xi in range(w):
                x = xi + 0.5 - cx
                u = (c * x + s * y) / ax
                v = (-s * x + c * y) / by
                d = np.sqrt(u * u + v * v)
                a = (1.0 - d) * m / softness + 0.5
                if a <= 0.0:
                    continue
                if a > 1.0:
                    a = 1.0
                af = np.float32(a)
                for k in range(ch):
                    canvas[yi, xi, k] = canvas[yi, xi, k] * (1 - af) + af * color[k]
        return canvas

    @numba.njit(cache=True)
    def _shift_hue_nb(img, delta):
        h, w, _ = img.shape
        out = np.empty_like(img)
        for yi in range(h):
            for xi in range(w):
                r = img[yi, xi, 0]
                g = img[yi, xi, 1]
                b = img[yi, xi, 2]
                maxc = max(r, g, b)
                minc = min(r, g, b)
                v = maxc
                dl = maxc - minc
                if maxc > 0:
                    s = dl / maxc
                else:
                    s = np.float32(0.0)
                if dl > 0:
                    rc = (maxc - r) / dl
                    gc = (maxc - g) / dl
                    bc = (maxc - b) / dl
                    if maxc == r:
                        hh = bc - gc
                    elif maxc == g:
                        hh = 2.0 + rc - bc
                    else:
                        hh = 4.0 + gc - rc
                    hh = (hh / 6.0) % 1.0
                else:
                    hh = 0.0
                hh = (np.float32(hh) + delta) % 1.0
                i6 = np.floor(hh * 6.0)
                f = hh * 6.0 - i6
                p = v * (1.0 - s)
                q = v * (1.0 - s * f)
                t = v * (1.0 - s * (1.0 - f))
                i = int(i6) % 6
                if i == 0:
                    r2, g2, b2 = v, t, p
                elif i == 1:
                    r2, g2, b2 = q, v, p
                elif i == 2:
                    r2, g2, b2 = p, v, t
                elif i == 3:
                    r2, g2, b2 = p, q, v
                elif i == 4:
                    r2, g2, b2 = t, p, v
                else:
                    r2, g2, b2 = v, p, q
                out[yi, xi, 0] = r2
                out[yi, xi, 1] = g2
                out[yi, xi, 2] = b2
        return out

    @numba.njit(cache=True)
    def _warp_bilinear_nb(img, inv, out_h, out_w):
        h, w, ch = img.shape
        out = np.empty((out_h, out_w, ch), dtype=np.float32)
        for yi in range(out_h):
            for xi in range(out_w):
                x = xi + 0.5
                y = yi + 0.5
                sx = inv[0, 0] * x + inv[0, 1] * y + inv[0, 2] - 0.5
                sy = inv[1, 0] * x + inv[1, 1] * y + inv[1, 2] - 0.5
                sx = min(max(sx, 0.0), w - 1.0)
                sy = min(max(sy, 0.0), h - 1.0)
                x0 = min(int(np.floor(sx)), max(w - 2, 0))
                y0 = min(int(np.floor(sy)), max(h - 2, 0))
                x1 = min(x0 + 1, w - 1)
                y1 = min(y0 + 1, h - 1)
                fx = sx - x0
                fy = sy - y0
                for k in range(ch):
                    top = img[y0, x0, k] * (1 - fx) + img[y0, x1, k] * fx
                    bot = img[y1, x0, k] * (1 - fx) + img[y1, x1, k] * fx
                    out[yi, xi, k] = top * (1 - fy) + bot * fy
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def paint_ellipse(canvas, cx, cy, ax, by, theta, color, softness=1.0):
    """Alpha-blend an anti-aliased filled ellipse into ``canvas`` in place.

    ``canvas`` is float32 (H, W, 3); centre and semi-axes are in pixels and
    ``theta`` rotates the ellipse in radians.
    """
    if ax <= 0 or by <= 0:
        raise ValueError("ellipse semi-axes must be positive")
    if numba_enabled():
        col = np.asarray(color, dtype=np.float32)
        return _paint_ellipse_nb(canvas, float(cx), float(cy), float(ax), float(by), float(theta), col, float(softness))
    return paint_ellipse_np(canvas, cx, cy, ax, by, theta, color, softness)


def shift_hue(img, delta):
    """Rotate hue of a float32 RGB image by ``delta`` turns (fraction of 360 degrees)."""
    img = np.ascontiguousarray(img, dtype=np.float32)
    if numba_enabled():
        return _shift_hue_nb(img, np.float32(delta))
    return shift_hue_np(img, delta)


def warp_bilinear(img, inv, out_h, out_w):
    """Bilinear resampling through an output-to-input affine map (2x3), edge-clamped."""
    img = np.ascontiguousarray(img, dtype=np.float32)
    inv = np.ascontiguousarray(inv, dtype=np.float64)
    if numba_enabled():
        return _warp_bilinear_nb(img, inv, int(out_h), int(out_w))
    return warp_bilinear_np(img, inv, int(out_h), int(out_w))
