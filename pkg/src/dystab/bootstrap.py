"""Alternating dynamic/static training rounds and prediction fusion."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .batching import FlowProvider
from .dynamic import (LossValue, _image4, evaluate_dynamic, loss_D, make_phi, make_psi, predict_sequence,
                      relative_motion, sequence_flows, train_dynamic)
from .metrics import border_mean, canonical_foreground, mean_iou
from .nn import ParamStore
from .static import f_alpha, make_chi, segment_static, train_static
from .tensor import Tensor, mean, no_grad

log = logging.getLogger(__name__)

MANIFEST = "bootstrap_state.json"
NETS = ("phi", "psi", "chi", "teacher")


class BootstrapError(RuntimeError):
    def __init__(self, round_idx, stage, cause):
        super().__init__(f"bootstrap round {round_idx} ({stage}) failed: {cause}")
        self.round_idx = round_idx
        self.stage = stage


def loss_J(phi, psi, chi, image, u12, u21, cfg, flows=None, occ=None):
    """loss_D plus lambda_obj times the F-measure of phi(u12) against chi's mask
    on the same image. chi's mask is a constant target, expressed in phi's
    current labelling: where phi's foreground owns the border the target is
    inverted, so the term never fights the motion objective over polarity."""
    d = loss_D(phi, psi, image, u12, u21, cfg, flows=flows, occ=occ)
    lam = cfg.bootstrap.lambda_obj
    if lam == 0:
        return d
    img = _image4(image)
    with no_grad():
        target = chi(img).data[:, 1:2]
    inverted = border_mean(d.masks[0].data[:, 0]) > 0.5
    target = np.where(inverted[:, None, None, None], 1.0 - target, target)
    obj = f_alpha(d.masks[0], Tensor(target.astype(np.float32)), cfg.static.alpha2)
    value = d.value + lam * mean(obj)
    terms = dict(d.terms, objectness=float(obj.data.mean()))
    return LossValue(value, terms, d.masks)


def objectness_objective(chi):
    def objective(phi, psi, image, u12, u21, cfg, flows=None, occ=None):
        return loss_J(phi, psi, chi, image, u12, u21, cfg, flows=flows, occ=occ)
    return objective


def fuse_predictions(phi_mask, chi_mask, threshold=0.5, rule="motion", moving=None):
    """Binary mask from a dynamic and a static foreground score map.

    ``moving`` flags, per frame, whether the flow showed any relative motion.
    Frames without it carry no dynamic evidence and take the static score alone.
    On the others ``rule`` combines the two; "motion" keeps phi's score.
    """
    a = np.asarray(phi_mask, dtype=np.float32)
    b = np.asarray(chi_mask, dtype=np.float32)
    if a.shape != b.shape:
        raise ValueError(f"fusion shape mismatch: {a.shape} vs {b.shape}")
    if rule == "motion":
        s = a
    elif rule == "product":
        s = a * b
    elif rule == "min":
        s = np.minimum(a, b)
    elif rule == "mean":
        s = 0.5 * (a + b)
    else:
        raise ValueError(f"unknown fusion rule {rule!r}")
    fused = s >= threshold
    if moving is None:
        return fused
    still = ~np.asarray(moving, dtype=bool).reshape((-1,) + (1,) * (a.ndim - 1))
    return np.where(still, b >= 0.5, fused)


def evaluate_round(phi, chi, corpus, cfg, flows=None):
    """mIoU of phi alone, chi alone and the fused prediction."""
    flows = flows or FlowProvider(corpus, cfg.dynamic.flow_source, cfg.flow)
    dyn = evaluate_dynamic(phi, corpus, flows)
    out = {"dynamic_miou": dyn["miou"], "flip_rate": dyn["flip_rate"]}
    if chi is None:
        return out
    b = cfg.bootstrap
    fused, static, gts = [], [], []
    for s, seq in enumerate(corpus):
        pm = canonical_foreground(predict_sequence(phi, seq, flows, s))
        cm = segment_static(chi, seq.frames)
        moving = [relative_motion(u) >= cfg.dynamic.min_motion for u in sequence_flows(seq, flows, s)]
        fused.extend(fuse_predictions(pm, cm, b.fusion_threshold, b.fusion, moving))
        static.extend(cm > 0.5)
        gts.extend(seq.masks)
    out["static_miou"] = mean_iou(static, gts)
    out["fused_miou"] = mean_iou(fused, gts)
    return out


@dataclass
class BootstrapState:
    round: int = 0
    checkpoints: dict = field(default_factory=dict)  # round -> {net name: ParamStore}
    metrics: list = field(default_factory=list)  # one dict per completed round
    seeds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def record(self, round_idx, nets, metrics):
        self.checkpoints[round_idx] = {k: v.params.copy() for k, v in nets.items() if v is not None}
        self.metrics.append(dict(metrics, round=round_idx))
        self.round = round_idx

    def val_miou(self):
        """Headline validation mIoU per completed round >= 1 (fused prediction)."""
        return [m["fused_miou"] for m in self.metrics if m["round"] >= 1]

    def manifest(self):
        return {
            "round": self.round,
            "seeds": self.seeds,
            "config": self.config,
            "metrics": self.metrics,
            "checkpoints": {str(k): {n: f"round_{k}/{n}.ckpt" for n in v} for k, v in sorted(self.checkpoints.items())},
        }

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        for k, nets in self.checkpoints.items():
            d = os.path.join(out_dir, f"round_{k}")
            os.makedirs(d, exist_ok=True)
            for name, params in nets.items():
                params.save(os.path.join(d, f"{name}.ckpt"))
        with open(os.path.join(out_dir, MANIFEST), "w") as f:
            json.dump(self.manifest(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, out_dir):
        with open(os.path.join(out_dir, MANIFEST)) as f:
            m = json.load(f)
        ckpts = {int(k): {n: ParamStore.load(os.path.join(out_dir, p)) for n, p in v.items()}
                 for k, v in m["checkpoints"].items()}
        return cls(m["round"], ckpts, m["metrics"], m["seeds"], m["config"])


def _seeds(seed):
    names = ("phi", "psi", "chi", "init") + tuple(f"round{k}" for k in range(1, 10))
    vals = np.random.SeedSequence(seed).generate_state(len(names))
    return {n: int(v) for n, v in zip(names, vals)}


def run_bootstrap(corpus, cfg, val=None, out_dir=None, flows=None, val_flows=None, resume=None):
    """Motion-only initialization, then ``cfg.bootstrap.rounds`` rounds of
    static distillation followed by objectness-reinforced dynamic training.

    ``resume`` is a BootstrapState; training continues after its last round
    from the stored networks. Returns the final BootstrapState.
    """
    if not corpus:
        raise ValueError("run_bootstrap needs a non-empty corpus")
    b = cfg.bootstrap
    seeds = _seeds(cfg.seed)
    flows = flows or FlowProvider(corpus, cfg.dynamic.flow_source, cfg.flow)
    if val is not None and val_flows is None:
        val_flows = FlowProvider(val, cfg.dynamic.flow_source, cfg.flow)
    phi, psi, chi = make_phi(cfg, seeds["phi"]), make_psi(cfg, seeds["psi"]), make_chi(cfg, seeds["chi"])
    teacher = None
    round_cfg = cfg.updated(**{"dynamic.lr": b.dynamic_lr}) if b.dynamic_lr > 0 else cfg

    def metrics(with_chi):
        return evaluate_round(phi, chi if with_chi else None, val, cfg, val_flows) if val else {}

    if resume is not None:
        state = resume
        nets = state.checkpoints[state.round]
        for name, net in (("phi", phi), ("psi", psi), ("chi", chi)):
            if name in nets:
                net.params.load_from(nets[name])
        start = state.round + 1
    else:
        state = BootstrapState(seeds=seeds, config=cfg.to_flat())
        try:
            train_dynamic(corpus, phi, psi, cfg, seed=seeds["init"], flows=flows)
        except Exception as exc:
            raise BootstrapError(0, "dynamic", exc) from exc
        state.record(0, {"phi": phi, "psi": psi}, metrics(False))
        start = 1
    for k in range(start, b.rounds + 1):
        rs = seeds[f"round{k}"]
        # each stage starts a fresh optimizer, so a resumed run matches an uninterrupted one
        for net in (phi, psi, chi):
            net.params.state = {}
        try:
            teacher, _ = train_static(corpus, phi, psi, chi, k, cfg, seed=rs, flows=flows)
        except Exception as exc:
            raise BootstrapError(k, "static", exc) from exc
        try:
            train_dynamic(corpus, phi, psi, round_cfg, epochs=b.dynamic_epochs, objective=objectness_objective(chi),
                          seed=rs + 1, flows=flows)
        except Exception as exc:
            raise BootstrapError(k, "dynamic", exc) from exc
        state.record(k, {"phi": phi, "psi": psi, "chi": chi,
                         "teacher": teacher.net if teacher is not None else None}, metrics(True))
        log.info("bootstrap round %d: %s", k, state.metrics[-1])
    if out_dir:
        state.save(out_dir)
    return state


def restore(state, cfg, round_idx=None):
    """(phi, psi, chi) networks holding the checkpoints of a round."""
    k = state.round if round_idx is None else round_idx
    nets = state.checkpoints[k]
    phi, psi, chi = make_phi(cfg), make_psi(cfg), make_chi(cfg)
    phi.params.load_from(nets["phi"])
    psi.params.load_from(nets["psi"])
    if "chi" in nets:
        chi.params.load_from(nets["chi"])
    else:
        chi = None
    return phi, psi, chi
