"""Single-image object model distilled from the motion masks."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .batching import FlowProvider, batches, nearest_partners, to_nchw
from .dynamic import LossValue, confidence, predict_sequence, relative_motion, sequence_flows, write_log
from .metrics import canonical_foreground, mean_iou
from .nn import SegNet
from .optim import adam_step
from .tensor import Tensor, as_tensor, div, mean, no_grad, reshape, tsum

log = logging.getLogger(__name__)

STATIC_LOG_FIELDS = ("epoch", "L_chi", "gate_mean", "gated_off", "val_miou")


def make_chi(cfg, seed=0):
    return SegNet(3, widths=cfg.static.widths, seed=seed, standardize=True)


def f_alpha(pred, target, alpha2=1.5):
    """Soft F-measure per sample. Inputs (N, ...) tensors or arrays; returns (N,)."""
    p, t = as_tensor(pred), as_tensor(target)
    if p.shape != t.shape:
        raise ValueError(f"f_alpha shape mismatch: {p.shape} vs {t.shape}")
    if p.ndim < 2:
        p, t = reshape(p, (1,) + p.shape), reshape(t, (1,) + t.shape)
    axes = tuple(range(1, p.ndim))
    tp = tsum(p * t, axis=axes)
    rho = div(tp, tsum(p, axis=axes), 1e-8)
    gamma = div(tp, tsum(t, axis=axes), 1e-8)
    return div((1.0 + alpha2) * rho * gamma, alpha2 * rho + gamma, 1e-8)


def f_measure(pred, target, alpha2=1.5):
    """Soft F-measure of one prediction against one target, as a float."""
    pred = np.asarray(pred, dtype=np.float32)
    target = np.asarray(target, dtype=np.float32)
    with no_grad():
        return float(f_alpha(pred[None], target[None], alpha2).data[0])


@dataclass
class PseudoLabel:
    mask: np.ndarray  # (H, W) soft foreground from phi, canonical polarity
    confidence: float
    frame: tuple = ()  # (sequence index, frame index)
    moving: bool = True  # whether phi's input flow had any relative motion

    def __post_init__(self):
        if not self.confidence >= 0:
            raise ValueError(f"pseudo-label confidence must be >= 0, got {self.confidence}")


class SnapshotTeacher:
    """Frozen copy of the static model."""

    def __init__(self, chi, round_idx):
        self.net = SegNet(3, widths=chi.widths, seed=0, standardize=chi.standardize)
        self.net.params.load_from(chi.params)
        self.round_idx = int(round_idx)

    @property
    def params(self):
        return self.net.params

    def __call__(self, image):
        with no_grad():
            return self.net(as_tensor(image))[:, 1:2]


def segment_static(chi, image):
    """Foreground score map of chi for an (H, W, 3) image or (N, H, W, 3) batch."""
    img = np.asarray(image, dtype=np.float32)
    single = img.ndim == 3
    with no_grad():
        out = chi(Tensor(to_nchw(img))).data[:, 1]
    return out[0] if single else out


def loss_chi(chi, image, pseudo, teacher, cfg, teacher_conf=None, psi=None, flows=None):
    """Confidence-gated distillation objective, to be maximized by chi.

    ``lambda_f * F(chi(I), teacher(I)) + max(c - c_teacher - delta, 0) * F(chi(I), m)``
    averaged over the batch. ``c_teacher`` is the confidence of the teacher's
    mask: taken from ``teacher_conf`` or computed with ``psi`` on ``flows``.
    Without a teacher the first term and ``c_teacher`` are zero. With
    ``cfg.static.gated`` off the pseudo term has unit weight.

    Labels drawn from motionless flow are gated off as well: on a uniform
    field every mask is inpainted perfectly and the near-empty ones still
    score through the eps floor of the ratios, so their confidence says
    nothing about the mask.
    """
    s = cfg.static
    pseudo = [pseudo] if isinstance(pseudo, PseudoLabel) else list(pseudo)
    # Tensors are (N, 3, H, W); arrays are (H, W, 3) or (N, H, W, 3)
    img = image if isinstance(image, Tensor) else Tensor(to_nchw(image))
    n = img.shape[0]
    if len(pseudo) != n:
        raise ValueError(f"{len(pseudo)} pseudo-labels for {n} images")
    pred = chi(img)[:, 1:2]
    target = Tensor(np.stack([p.mask for p in pseudo])[:, None].astype(np.float32))
    conf = np.array([p.confidence for p in pseudo], dtype=np.float32)
    t_mask = None
    if teacher is None:
        t_conf = np.zeros(n, dtype=np.float32)
        lam = 0.0
    else:
        t_mask = teacher(img)
        lam = s.lambda_f
        if teacher_conf is None:
            if psi is None or flows is None:
                raise ValueError("teacher confidence needs psi and flows")
            teacher_conf = confidence(t_mask.data, flows, img.data, psi, cfg.dynamic.eps)
        t_conf = np.broadcast_to(np.asarray(teacher_conf, dtype=np.float32), (n,))
    if s.gated:
        gate = np.maximum(conf - t_conf - s.delta, 0.0).astype(np.float32)
        gate *= np.array([p.moving for p in pseudo], dtype=np.float32)
    else:
        gate = np.ones(n, dtype=np.float32)
    per = f_alpha(pred, target, s.alpha2) * gate
    if lam and t_mask is not None:
        per = lam * f_alpha(pred, Tensor(t_mask.data), s.alpha2) + per
    return LossValue(mean(per), {"L_chi": float(per.data.mean()), "gate_mean": float(gate.mean()),
                                 "gated_off": int((gate == 0).sum())}, (pred,))


# -- pseudo-labels ------------------------------------------------------------------
def frame_flow_samples(seq, flows, s, t, count):
    return [flows(s, t, k) for k in nearest_partners(t, seq.n_frames, count)]


def batch_flow_samples(corpus, flows, frames, count):
    """Flow samples for a batch of (sequence, frame) ids: list over samples of (N, H, W, 2)."""
    per = [frame_flow_samples(corpus[s], flows, s, t, count) for s, t in frames]
    k = min(len(f) for f in per)
    return [np.stack([f[i] for f in per]) for i in range(k)]


def pseudo_labels(phi, psi, corpus, cfg, flows=None):
    """phi's canonical mask, its confidence and whether phi saw any relative
    motion, for every frame of the corpus."""
    flows = flows or FlowProvider(corpus, cfg.dynamic.flow_source, cfg.flow)
    out = []
    for s, seq in enumerate(corpus):
        if seq.n_frames < 2:
            raise ValueError(f"sequence {s} has no frame pairs")
        masks = canonical_foreground(predict_sequence(phi, seq, flows, s))
        frames = [(s, t) for t in range(seq.n_frames)]
        samples = batch_flow_samples(corpus, flows, frames, cfg.dynamic.flow_samples)
        conf = np.atleast_1d(confidence(masks, samples, seq.frames, psi, cfg.dynamic.eps))
        moving = [relative_motion(u) >= cfg.dynamic.min_motion for u in sequence_flows(seq, flows, s)]
        out.extend(PseudoLabel(masks[t], max(float(c), 0.0), f, bool(moving[t]))
                   for t, (c, f) in enumerate(zip(conf, frames)))
    return out


def evaluate_static(chi, images, gts):
    preds = [segment_static(chi, im) > 0.5 for im in images]
    return mean_iou(preds, list(gts))


def corpus_frames(corpus):
    images = [f for seq in corpus for f in seq.frames]
    gts = [m for seq in corpus for m in seq.masks]
    return images, gts


# -- training -------------------------------------------------------------------------
def dihedral(a, k):
    """One of the eight flips/quarter turns of the last two axes; k in 0..7."""
    a = np.rot90(a, k % 4, axes=(-2, -1))
    return a[..., ::-1] if k >= 4 else a


def train_static(corpus, phi, psi, chi, round_idx, cfg, epochs=None, seed=None, flows=None,
                 val=None, pseudo=None, log_path=None):
    """Ascend the gated distillation objective over every frame of the corpus.

    ``round_idx`` counts bootstrapping rounds from 1; from round 2 on, a
    snapshot of chi taken at entry acts as teacher. Returns ``(teacher, rows)``.
    """
    if not corpus:
        raise ValueError("train_static needs a non-empty corpus")
    s = cfg.static
    epochs = s.epochs if epochs is None else epochs
    flows = flows or FlowProvider(corpus, cfg.dynamic.flow_source, cfg.flow)
    if pseudo is None:
        pseudo = pseudo_labels(phi, psi, corpus, cfg, flows)
    teacher = SnapshotTeacher(chi, round_idx) if round_idx >= 2 else None
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    square = corpus[0].frames.shape[1] == corpus[0].frames.shape[2]
    rows = []
    for epoch in range(epochs):
        vals, gates, off = [], [], 0
        for idx in batches(rng.permutation(len(pseudo)), s.batch_size):
            labels = [pseudo[i] for i in idx]
            image = to_nchw(np.stack([corpus[p.frame[0]].frames[p.frame[1]] for p in labels]))
            k = 0
            if s.augment:
                k = int(rng.choice([0, 1, 2, 3, 4, 5, 6, 7] if square else [0, 2, 4, 6]))
            t_conf = None
            if teacher is not None:
                # the teacher is scored against the flow, so in the frame's own orientation
                t_mask = teacher(Tensor(image)).data
                samples = batch_flow_samples(corpus, flows, [p.frame for p in labels],
                                             cfg.dynamic.flow_samples)
                t_conf = np.atleast_1d(confidence(t_mask, samples, Tensor(image), psi, cfg.dynamic.eps))
            if k:
                image = np.ascontiguousarray(dihedral(image, k))
                labels = [PseudoLabel(np.ascontiguousarray(dihedral(p.mask, k)), p.confidence, p.frame, p.moving)
                          for p in labels]
            loss = loss_chi(chi, Tensor(image), labels, teacher, cfg, teacher_conf=t_conf)
            (-loss.value).backward()
            adam_step(chi.params, s.lr, s.beta1, s.beta2)
            vals.append(loss.terms["L_chi"])
            gates.append(loss.terms["gate_mean"])
            off += loss.terms["gated_off"]
        row = {"epoch": epoch + 1, "L_chi": float(np.mean(vals)), "gate_mean": float(np.mean(gates)),
               "gated_off": off, "val_miou": float("nan")}
        if val is not None:
            row["val_miou"] = evaluate_static(chi, *val)
        log.info("static round %d epoch %d: %s", round_idx, epoch + 1, row)
        rows.append(row)
    if log_path:
        write_log(rows, log_path, STATIC_LOG_FIELDS)
    return teacher, rows
