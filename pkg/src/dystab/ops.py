"""Spatial ops on NCHW tensors: convolutions, resampling, grid sampling."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _make, as_tensor, dt


def _im2col(xp, kh, kw, stride):
    # xp: padded (N, C, H, W) -> (N, Ho, Wo, C*kh*kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw), ho, wo


def _col2im(cols, shape_padded, kh, kw, stride, ho, wo):
    # cols: (N, Ho, Wo, C, kh, kw) -> accumulated padded image
    out = np.zeros(shape_padded, dtype=dt())
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation. x: (N, C, H, W), w: (O, C, kh, kw), b: (O,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = _col2im(gcols, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), parents, bw)


def conv_transpose2d(x, w, b=None, stride=2, padding=0):
    """Transposed convolution. x: (N, C, H, W), w: (C, O, kh, kw).

    Output size is ``(H - 1) * stride + kh - 2 * padding``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weight {w.shape}")
    n, c, h, wd = x.shape
    _, o, kh, kw = w.shape
    p = padding
    hp, wp = (h - 1) * stride + kh, (wd - 1) * stride + kw
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wmat = w.data.reshape(c, -1)
    cols = (xm @ wmat).reshape(n, h, wd, o, kh, kw)
    full = _col2im(cols, (n, o, hp, wp), kh, kw, stride, h, wd)
    out = full[:, :, p:hp - p, p:wp - p] if p else full
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, -1, 1, 1)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        gcols, _, _ = _im2col(gp, kh, kw, stride)  # (N*h*w, O*kh*kw)
        gx = (gcols @ wmat.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xm.T @ gcols).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), parents, bw)


def upsample_nearest(x, factor=2):
    x = as_tensor(x)
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(g):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), bw)


def _linear_resize_matrix(n_in, n_out):
    # half-pixel centres, edge-clamped (align_corners=False)
    m = np.zeros((n_out, n_in), dtype=dt())
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        m[i, i0] += 1 - f
        m[i, i1] += f
    return m


def separable(x, ah, aw):
    """Apply ``ah`` along rows and ``aw`` along columns: out = ah @ x @ aw.T per channel."""
    x = as_tensor(x)
    ah = np.asarray(ah, dtype=dt())
    aw = np.asarray(aw, dtype=dt())
    out = np.einsum("ih,nchw,jw->ncij", ah, x.data, aw, optimize=True)
    return _make(out.astype(dt()), (x,),
                 lambda g: (np.einsum("ih,ncij,jw->nchw", ah, g, aw, optimize=True).astype(dt()),))


def upsample_bilinear(x, factor=2):
    x = as_tensor(x)
    _, _, h, w = x.shape
    return separable(x, _linear_resize_matrix(h, h * factor), _linear_resize_matrix(w, w * factor))


def gaussian_matrix(n, sigma):
    """Zero-padded Gaussian blur along one axis as an (n, n) matrix."""
    d = np.arange(n)[:, None] - np.arange(n)[None, :]
    return np.exp(-0.5 * (d / sigma) ** 2) / (np.sqrt(2 * np.pi) * sigma)


def grid_sample(field, gx, gy):
    """Bilinear lookup ``field[n, :, gy, gx]`` at fractional pixel coordinates.

    field: (N, C, H, W); gx, gy: (N, H', W') in pixel units. Coordinates are
    clamped to the image (border replication), so gradients w.r.t. a clamped
    coordinate are zero. Differentiable w.r.t. field, gx and gy.
    """
    field, gx, gy = as_tensor(field), as_tensor(gx), as_tensor(gy)
    if field.ndim != 4 or gx.shape != gy.shape or gx.ndim != 3 or gx.shape[0] != field.shape[0]:
        raise ShapeError(f"grid_sample: field {field.shape} incompatible with grid {gx.shape}/{gy.shape}")
    n, c, h, w = field.shape
    x = np.clip(gx.data, 0, w - 1)
    y = np.clip(gy.data, 0, h - 1)
    inside_x = (gx.data > 0) & (gx.data < w - 1)
    inside_y = (gy.data > 0) & (gy.data < h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0).astype(dt())[:, None]
    fy = (y - y0).astype(dt())[:, None]
    flat = field.data.reshape(n, c, h * w)

    def gather(yy, xx):
        idx = (yy * w + xx).reshape(n, 1, -1)
        return np.take_along_axis(flat, np.broadcast_to(idx, (n, c, idx.shape[-1])), axis=2).reshape(
            (n, c) + gx.shape[1:])

    v00, v01, v10, v11 = gather(y0, x0), gather(y0, x1), gather(y1, x0), gather(y1, x1)
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    out = top * (1 - fy) + bot * fy

    def bw(g):
        gf = ggx = ggy = None
        if field.requires_grad:
            gf = np.zeros((n, c, h * w), dtype=dt())
            for yy, xx, wgt in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)),
                                (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy)):
                idx = (yy * w + xx).reshape(n, -1)
                contrib = (g * wgt).reshape(n, c, -1)
                for i in range(n):
                    for ch in range(c):
                        gf[i, ch] += np.bincount(idx[i], weights=contrib[i, ch], minlength=h * w).astype(dt())
            gf = gf.reshape(n, c, h, w)
        if gx.requires_grad:
            d = ((v01 - v00) * (1 - fy) + (v11 - v10) * fy)
            ggx = (g * d).sum(axis=1) * inside_x
        if gy.requires_grad:
            ggy = (g * (bot - top)).sum(axis=1) * inside_y
        return gf, ggx, ggy

    return _make(out.astype(dt()), (field, gx, gy), bw)
