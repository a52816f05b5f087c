"""Motion segmentation network, adversarial inpainter and their losses.

Conventions: masks are (N, 1, H, W) tensors of foreground probability, images
(N, 3, H, W), flows (N, H, W, 2) numpy arrays in pixels. Flows are treated as
constants; gradients flow into masks and network parameters only.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import flow as flowlib
from .batching import FlowProvider, assemble, batches, sample_pairs, to_nchw
from .metrics import canonical_foreground, flip_rate, mean_iou
from .nn import InpaintNet, SegNet
from .optim import adam_step
from .tensor import Tensor, as_tensor, clamp_max, div, l2norm, mean, no_grad, reshape, tabs, tsum

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "L_A", "L_TC", "val_miou", "flip_rate")


@dataclass
class LossValue:
    value: Tensor
    terms: dict = field(default_factory=dict)
    masks: tuple = ()

    def __float__(self):
        return self.value.item()


def make_phi(cfg, seed=0):
    return SegNet(2, widths=cfg.dynamic.widths, seed=seed, input_scale=cfg.dynamic.input_scale,
                  center=True)


def make_psi(cfg, seed=0):
    return InpaintNet(widths=cfg.dynamic.widths, seed=seed, flow_scale=1.0 / cfg.dynamic.input_scale)


def _mask4(mask):
    m = as_tensor(mask)
    if m.ndim == 2:
        m = reshape(m, (1, 1) + m.shape)
    elif m.ndim == 3:
        m = reshape(m, (m.shape[0], 1) + m.shape[1:])
    return m


def _image4(image):
    if isinstance(image, Tensor):
        return image
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3:
        img = img[None]
    if img.shape[-1] == 3 and img.shape[1] != 3:
        img = img.transpose(0, 3, 1, 2)
    return Tensor(np.ascontiguousarray(img))


def _flow4(u):
    u = np.asarray(u, dtype=np.float32)
    return u[None] if u.ndim == 3 else u


def loss_A(mask, flows, image, psi, eps=1e-2, bounded=True):
    """Contextual-information-separation loss: how badly ``psi`` inpaints the
    flow inside the mask from the outside, plus the symmetric term.

    Each ratio is ``sum_u |m*(u - psi)| / (sum_u |m*u| + eps)`` with the L2
    norm taken over the whole field; ``bounded`` caps each ratio at 1, the
    zero-predictor value, so the total lies in [0, 2]. Returns the batch mean.
    """
    m = _mask4(mask)
    img = _image4(image)
    inv = 1.0 - m
    flows = [_flow4(u) for u in flows]
    if not flows:
        raise ValueError("loss_A needs at least one flow sample")
    n = m.shape[0]
    # psi(m, empty, I) is zero: samples whose context region is empty get no prediction
    has_out = (inv.data.reshape(n, -1).sum(1) > 1e-6).astype(np.float32).reshape(n, 1, 1, 1)
    has_in = (m.data.reshape(n, -1).sum(1) > 1e-6).astype(np.float32).reshape(n, 1, 1, 1)
    num_in = num_out = den_in = den_out = 0.0
    for u in flows:
        ut = Tensor(to_nchw(u))
        inside, outside = m * ut, inv * ut
        pred_in = psi(m, outside, img) * has_out
        pred_out = psi(inv, inside, img) * has_in
        num_in = num_in + l2norm(inside - m * pred_in, axis=(1, 2, 3))
        num_out = num_out + l2norm(outside - inv * pred_out, axis=(1, 2, 3))
        den_in = den_in + l2norm(inside, axis=(1, 2, 3))
        den_out = den_out + l2norm(outside, axis=(1, 2, 3))
    r_in = div(num_in, den_in, eps)
    r_out = div(num_out, den_out, eps)
    if bounded:
        r_in, r_out = clamp_max(r_in, 1.0), clamp_max(r_out, 1.0)
    per = r_in + r_out
    return LossValue(mean(per), {"L_A": float(per.data.mean()), "inside": float(r_in.data.mean()),
                                 "outside": float(r_out.data.mean()), "per_sample": per.data.copy()})


def confidence(mask, flows, image, psi, eps=1e-2):
    """L_A of a fixed mask, without gradient tracking. Scalar for one image,
    array for a batch."""
    with no_grad():
        per = loss_A(mask, flows, image, psi, eps, bounded=True).terms["per_sample"]
    return float(per[0]) if per.size == 1 else per


def union_occlusion(u12, u21, a=flowlib.OCC_A, b=flowlib.OCC_B):
    u12, u21 = _flow4(u12), _flow4(u21)
    return np.stack([~flowlib.covisible(f, g, a, b) for f, g in zip(u12, u21)])


def loss_TC(m1, m2, u12, u21, occ=None):
    """Mean absolute disagreement between each mask and the other warped onto it,
    over pixels co-visible in both directions."""
    m1, m2 = _mask4(m1), _mask4(m2)
    u12, u21 = _flow4(u12), _flow4(u21)
    if occ is None:
        occ = union_occlusion(u12, u21)
    vis = (~np.asarray(occ, dtype=bool)).reshape(m1.shape).astype(np.float32)
    count = vis.reshape(len(vis), -1).sum(1)
    diff = tabs(m1 - flowlib.warp(m2, u12)) + tabs(m2 - flowlib.warp(m1, u21))
    per = div(tsum(diff * vis, axis=(1, 2, 3)), np.maximum(count, 1.0), eps=0.0)
    all_occluded = bool(np.any(count == 0))
    return LossValue(mean(per), {"L_TC": float(per.data.mean()), "all_occluded": all_occluded})


def phi_masks(phi, u12, u21):
    m1 = phi(Tensor(to_nchw(_flow4(u12))))[:, 1:2]
    m2 = phi(Tensor(to_nchw(_flow4(u21))))[:, 1:2]
    return m1, m2


def loss_D(phi, psi, image, u12, u21, cfg, flows=None, occ=None):
    """L_A(phi(u12)) - |lambda_tc| * L_TC; phi ascends this, so the stored sign
    of lambda_tc is ignored."""
    d = cfg.dynamic
    m1, m2 = phi_masks(phi, u12, u21)
    samples = [u12] + list(flows or [])
    la = loss_A(m1, samples, image, psi, d.eps, bounded=True)
    lam = abs(d.lambda_tc)
    if lam == 0:
        return LossValue(la.value, {"L_A": la.terms["L_A"], "L_TC": 0.0}, (m1, m2))
    tc = loss_TC(m1, m2, u12, u21, occ)
    return LossValue(la.value - lam * tc.value, {"L_A": la.terms["L_A"], "L_TC": tc.terms["L_TC"]}, (m1, m2))


# -- evaluation -----------------------------------------------------------------
def sequence_flows(seq, flows, s):
    """Flow fed to phi for each frame: to the next frame, last frame backwards."""
    t = seq.n_frames
    return np.stack([flows(s, i, i + 1) if i + 1 < t else flows(s, i, i - 1) for i in range(t)])


def predict_sequence(phi, seq, flows, s):
    """Raw foreground scores of phi for every frame, (T, H, W)."""
    with no_grad():
        return phi(Tensor(to_nchw(sequence_flows(seq, flows, s)))).data[:, 1]


def evaluate_dynamic(phi, corpus, flows=None):
    """mIoU of canonicalized thresholded masks and label-flip rate of raw masks."""
    flows = flows or FlowProvider(corpus)
    preds, gts, flips = [], [], []
    for s, seq in enumerate(corpus):
        raw = predict_sequence(phi, seq, flows, s)
        preds.extend(canonical_foreground(raw) > 0.5)
        gts.extend(seq.masks)
        flips.append(flip_rate(raw, [flows(s, i, i + 1) for i in range(seq.n_frames - 1)]))
    return {"miou": mean_iou(preds, gts), "flip_rate": float(np.mean(flips)) if flips else 0.0}


# -- training ---------------------------------------------------------------------
def psi_step(phi, psi, batch, cfg):
    d = cfg.dynamic
    with no_grad():
        m1 = phi(batch.flow_tensor("u12"))[:, 1:2]
    m1 = Tensor(m1.data)
    with phi.params.frozen():
        loss = loss_A(m1, batch.flows(), Tensor(batch.image), psi, d.eps, bounded=False)
        loss.value.backward()
    adam_step(psi.params, d.lr, d.beta1, d.beta2)
    return loss


def phi_step(phi, psi, batch, cfg, objective=None):
    d = cfg.dynamic
    objective = objective or loss_D
    with psi.params.frozen():
        loss = objective(phi, psi, Tensor(batch.image), batch.u12, batch.u21, cfg,
                         flows=batch.extra, occ=~batch.covis)
        (-loss.value).backward()
    adam_step(phi.params, d.lr, d.beta1, d.beta2)
    return loss


def relative_motion(u):
    """Largest deviation of a flow field from its per-component median, in pixels."""
    u = np.asarray(u, dtype=np.float32)
    dev = u - np.median(u.reshape(-1, 2), axis=0)
    return float(np.sqrt((dev ** 2).sum(-1)).max())


def train_dynamic(corpus, phi, psi, cfg, epochs=None, val=None, objective=None, seed=None,
                  flows=None, val_flows=None, log_path=None):
    """Alternating adversarial training: ``phi_steps`` ascent steps on phi, then
    ``psi_steps`` descent steps on psi, repeated over shuffled frame pairs.

    Pairs whose flow has no relative motion (``relative_motion`` below
    ``min_motion``) are skipped: a uniform field is inpainted perfectly from
    any context, so only the trivial mask scores there and such pairs would
    pull phi toward it.

    ``objective`` replaces the phi loss (default ``loss_D``). Returns the list
    of per-epoch log rows.
    """
    if not corpus:
        raise ValueError("train_dynamic needs a non-empty corpus")
    d = cfg.dynamic
    epochs = d.epochs if epochs is None else epochs
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    flows = flows or FlowProvider(corpus, d.flow_source, cfg.flow)
    if val is not None and val_flows is None:
        val_flows = FlowProvider(val, d.flow_source, cfg.flow)
    cycle = d.phi_steps + d.psi_steps
    step, rows = 0, []
    for epoch in range(epochs):
        la, tc = [], []
        pairs = sample_pairs(corpus, rng, d.max_interval, d.flow_samples)
        moving = [p for p in pairs if relative_motion(flows(p.seq, p.t0, p.t1)) >= d.min_motion]
        for chunk in batches(moving or pairs, d.batch_size):
            batch = assemble(chunk, corpus, flows)
            if step % cycle < d.phi_steps:
                loss = phi_step(phi, psi, batch, cfg, objective)
                la.append(loss.terms["L_A"])
                tc.append(loss.terms.get("L_TC", 0.0))
            else:
                psi_step(phi, psi, batch, cfg)
            step += 1
        row = {"epoch": epoch + 1, "L_A": float(np.mean(la)) if la else float("nan"),
               "L_TC": float(np.mean(tc)) if tc else float("nan"),
               "val_miou": float("nan"), "flip_rate": float("nan")}
        if val:
            row.update({("val_miou" if k == "miou" else k): v
                        for k, v in evaluate_dynamic(phi, val, val_flows).items()})
        log.info("dynamic epoch %d: %s", epoch + 1, row)
        rows.append(row)
    if log_path:
        write_log(rows, log_path)
    return rows


def write_log(rows, path, fields=LOG_FIELDS):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(fields), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
