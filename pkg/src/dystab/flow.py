"""Optical flow: coarse-to-fine Horn-Schunck, warping, occlusion, .flo I/O.

Flow fields are (H, W, 2) float32 arrays holding (dx, dy) pixel displacements
from the first frame to the second: pixel ``x`` of frame A corresponds to
``x + flow(x)`` in frame B.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import ops
from .tensor import Tensor, as_tensor

FLO_MAGIC = 202021.25
OCC_A = 0.01
OCC_B = 0.5


class FlowFormatError(ValueError):
    pass


def _gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img @ np.array([0.299, 0.587, 0.114])[: img.shape[2]] if img.shape[2] == 3 else img.mean(axis=2)
    return img


def _bilinear(img, x, y):
    # border-clamped bilinear lookup on a 2-D array
    h, w = img.shape
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _downsample(img):
    blurred = ndimage.gaussian_filter(img, 1.0, mode="nearest")
    return blurred[::2, ::2]


def _upsample_flow(flow, shape):
    h, w = shape
    zy = h / flow.shape[0]
    zx = w / flow.shape[1]
    out = np.empty((h, w, 2))
    for k, z in ((0, zx), (1, zy)):
        out[..., k] = ndimage.zoom(flow[..., k], (zy, zx), order=1, mode="nearest", grid_mode=True)[:h, :w] * z
    return out


_AVG = np.array([[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]])
_DERIV = np.array([-1.0, 8.0, 0.0, -8.0, 1.0]) / 12.0


def _hs_level(i1, i2, flow, iters, alpha, n_warps):
    h, w = i1.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    per_warp = max(1, iters // n_warps)
    u, v = flow[..., 0].copy(), flow[..., 1].copy()
    for _ in range(n_warps):
        i2w = _bilinear(i2, xx + u, yy + v)
        ix = 0.5 * (ndimage.correlate1d(i1, _DERIV[::-1], axis=1, mode="nearest")
                    + ndimage.correlate1d(i2w, _DERIV[::-1], axis=1, mode="nearest"))
        iy = 0.5 * (ndimage.correlate1d(i1, _DERIV[::-1], axis=0, mode="nearest")
                    + ndimage.correlate1d(i2w, _DERIV[::-1], axis=0, mode="nearest"))
        it = i2w - i1
        u0, v0 = u.copy(), v.copy()
        den = alpha ** 2 + ix ** 2 + iy ** 2
        for _ in range(per_warp):
            ub = ndimage.correlate(u, _AVG, mode="nearest")
            vb = ndimage.correlate(v, _AVG, mode="nearest")
            r = (ix * (ub - u0) + iy * (vb - v0) + it) / den
            u = ub - ix * r
            v = vb - iy * r
    return np.stack([u, v], axis=-1)


def estimate_flow(frame_a, frame_b, levels=3, iters=50, alpha=0.1, n_warps=5):
    """Dense flow from ``frame_a`` to ``frame_b``.

    Coarse-to-fine Horn-Schunck with image warping between linearizations.
    ``alpha`` weights the smoothness term; ``iters`` Jacobi sweeps are spent
    per pyramid level, split evenly across ``n_warps`` re-linearizations.
    """
    a, b = _gray(frame_a), _gray(frame_b)
    if a.shape != b.shape:
        raise ValueError(f"frame size mismatch: {a.shape} vs {b.shape}")
    pyr = [(a, b)]
    for _ in range(levels - 1):
        pa, pb = pyr[-1]
        if min(pa.shape) < 8:
            break
        pyr.append((_downsample(pa), _downsample(pb)))
    flow = np.zeros(pyr[-1][0].shape + (2,))
    for lvl in range(len(pyr) - 1, -1, -1):
        i1, i2 = pyr[lvl]
        if flow.shape[:2] != i1.shape:
            flow = _upsample_flow(flow, i1.shape)
        flow = _hs_level(i1, i2, flow, iters, alpha, n_warps)
    flow = np.nan_to_num(flow, nan=0.0, posinf=0.0, neginf=0.0)
    lim = float(max(a.shape))
    return np.clip(flow, -lim, lim).astype(np.float32)


def _pixel_grid(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return xx.astype(np.float32), yy.astype(np.float32)


def warp(field, flow):
    """``out(x) = field(x + flow(x))`` by bilinear sampling, border-clamped.

    ``field`` is (H, W, C) or (H, W) numpy data, or a Tensor laid out as
    (N, C, H, W); ``flow`` is (H, W, 2) or, for the tensor path, (N, H, W, 2).
    Returns the same kind as ``field``; the tensor path is differentiable.
    """
    if isinstance(field, Tensor):
        flow = np.asarray(flow, dtype=np.float32)
        if flow.ndim == 3:
            flow = flow[None]
        n, _, h, w = field.shape
        if flow.shape != (n, h, w, 2):
            raise ValueError(f"flow shape {flow.shape} does not match field {field.shape}")
        xx, yy = _pixel_grid(h, w)
        gx = Tensor(xx[None] + flow[..., 0])
        gy = Tensor(yy[None] + flow[..., 1])
        return ops.grid_sample(field, gx, gy)
    arr = np.asarray(field, dtype=np.float32)
    flow = np.asarray(flow, dtype=np.float32)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[..., None]
    if flow.shape != arr.shape[:2] + (2,):
        raise ValueError(f"flow shape {flow.shape} does not match field {arr.shape}")
    t = as_tensor(arr.transpose(2, 0, 1)[None])
    out = warp(t, flow).data[0].transpose(1, 2, 0)
    return out[..., 0] if squeeze else out


def occlusion_map(u12, u21, a=OCC_A, b=OCC_B):
    """Forward-backward consistency: True where a pixel of frame 1 is occluded
    in frame 2 or maps outside the image."""
    u12 = np.asarray(u12, dtype=np.float64)
    u21 = np.asarray(u21, dtype=np.float64)
    if u12.shape != u21.shape:
        raise ValueError(f"flow size mismatch: {u12.shape} vs {u21.shape}")
    h, w = u12.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    tx, ty = xx + u12[..., 0], yy + u12[..., 1]
    outside = (tx < 0) | (tx > w - 1) | (ty < 0) | (ty > h - 1)
    back = np.stack([_bilinear(u21[..., 0], tx, ty), _bilinear(u21[..., 1], tx, ty)], axis=-1)
    lhs = ((u12 + back) ** 2).sum(-1)
    rhs = a * ((u12 ** 2).sum(-1) + (back ** 2).sum(-1)) + b
    return (lhs > rhs) | outside


def covisible(u12, u21, a=OCC_A, b=OCC_B):
    """Pixels not occluded in either direction."""
    return ~(occlusion_map(u12, u21, a, b) | occlusion_map(u21, u12, a, b))


# -- Middlebury .flo ----------------------------------------------------------
def write_flo(flow, path):
    flow = np.asarray(flow, dtype=np.float32)
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([w, h], dtype="<i4").tofile(f)
        np.ascontiguousarray(flow, dtype="<f4").tofile(f)


def read_flo(path):
    with open(path, "rb") as f:
        magic = np.fromfile(f, "<f4", count=1)
        if magic.size != 1 or magic[0] != np.float32(FLO_MAGIC):
            raise FlowFormatError(f"{path}: bad .flo magic")
        w, h = (int(v) for v in np.fromfile(f, "<i4", count=2))
        data = np.fromfile(f, "<f4", count=2 * w * h)
    if data.size != 2 * w * h:
        raise FlowFormatError(f"{path}: truncated payload")
    return data.reshape(h, w, 2).astype(np.float32)


# -- visualization ------------------------------------------------------------
def _color_wheel():
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    cols = []
    cols += [(255, 255 * i / ry, 0) for i in range(ry)]
    cols += [(255 - 255 * i / yg, 255, 0) for i in range(yg)]
    cols += [(0, 255, 255 * i / gc) for i in range(gc)]
    cols += [(0, 255 - 255 * i / cb, 255) for i in range(cb)]
    cols += [(255 * i / bm, 0, 255) for i in range(bm)]
    cols += [(255, 0, 255 - 255 * i / mr) for i in range(mr)]
    return np.array(cols) / 255.0


def flow_to_color(flow):
    """Middlebury color-wheel rendering normalized by the field's max magnitude.

    Returns an (H, W, 3) float image in [0, 1]; zero flow is white.
    """
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    mag = np.sqrt(u ** 2 + v ** 2)
    rad = mag / max(mag.max(), 1e-12) if mag.max() > 0 else np.zeros_like(mag)
    wheel = _color_wheel()
    ncols = len(wheel)
    ang = np.arctan2(-v, -u) / np.pi
    fk = (ang + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    r = np.minimum(rad, 1.0)[..., None]
    col = 1 - r * (1 - col)
    return col.astype(np.float32)
