"""Evaluation metrics on binary masks."""
from __future__ import annotations

import numpy as np

from .flow import warp


def miou(pred, gt):
    """Intersection over union of two binary masks.

    1.0 when both are empty, 0.0 when exactly one is.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask size mismatch: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def mean_iou(preds, gts):
    return float(np.mean([miou(p, g) for p, g in zip(preds, gts)])) if len(preds) else float("nan")


def precision_recall(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    tp = np.logical_and(pred, gt).sum()
    precision = tp / pred.sum() if pred.sum() else 0.0
    recall = tp / gt.sum() if gt.sum() else 0.0
    return float(precision), float(recall)


def f_alpha_binary(pred, gt, alpha2=1.5):
    p, r = precision_recall(pred, gt)
    if p == 0 and r == 0:
        return 0.0
    return float((1 + alpha2) * p * r / (alpha2 * p + r))


def border_mean(fg):
    """Mean score on the one-pixel border of each (H, W) map of an (N, H, W) batch."""
    x = np.asarray(fg, dtype=np.float32)
    return np.concatenate([x[:, 0, :], x[:, -1, :], x[:, 1:-1, 0], x[:, 1:-1, -1]], axis=1).mean(axis=1)


def canonical_foreground(fg):
    """Resolve the two-region labelling ambiguity of a soft foreground map.

    Sprites never touch the one-pixel image border, so the region that owns
    most of the border is background: if the border's mean score exceeds 0.5
    the map is inverted. Works on (H, W) or batched (N, H, W) arrays.
    """
    fg = np.asarray(fg, dtype=np.float32)
    single = fg.ndim == 2
    x = fg[None] if single else fg
    out = np.where((border_mean(x) > 0.5)[:, None, None], 1.0 - x, x).astype(np.float32)
    return out[0] if single else out


def flip_rate(masks, flows_fw, threshold=0.5):
    """Fraction of adjacent pairs whose masks disagree after warping.

    ``masks`` (T, H, W) soft or binary; ``flows_fw[t]`` maps frame t to t+1.
    A pair counts as flipped when IoU(m_t, warp(m_{t+1}, u_t)) < threshold.
    """
    masks = np.asarray(masks, dtype=np.float32)
    if len(masks) < 2:
        return 0.0
    flips = 0
    for t in range(len(masks) - 1):
        warped = warp(masks[t + 1], flows_fw[t]) > 0.5
        flips += miou(masks[t] > 0.5, warped) < threshold
    return flips / (len(masks) - 1)
