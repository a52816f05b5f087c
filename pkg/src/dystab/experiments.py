"""Ablation harness, confidence histograms and the growing-corpus study."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .batching import FlowProvider
from .bootstrap import restore, run_bootstrap
from .dynamic import confidence, evaluate_dynamic, make_phi, make_psi, predict_sequence, train_dynamic
from .metrics import canonical_foreground, f_alpha_binary, mean_iou, miou, precision_recall
from .static import PseudoLabel, batch_flow_samples, make_chi, pseudo_labels, segment_static, train_static
from .synthdata import generate_corpus

log = logging.getLogger(__name__)

CSV_FIELDS = ("experiment", "variant", "round", "seed", "miou", "precision", "recall", "f_alpha",
              "flip_rate", "runtime_s")


def seg_metrics(preds, gts, alpha2=1.5, flip=float("nan")):
    """Frame-averaged mIoU, precision, recall and F of binary masks."""
    preds = [np.asarray(p, dtype=bool) for p in preds]
    gts = [np.asarray(g, dtype=bool) for g in gts]
    pr = np.array([precision_recall(p, g) for p, g in zip(preds, gts)]) if preds else np.zeros((0, 2))
    return {
        "miou": mean_iou(preds, gts),
        "precision": float(pr[:, 0].mean()) if len(pr) else float("nan"),
        "recall": float(pr[:, 1].mean()) if len(pr) else float("nan"),
        "f_alpha": float(np.mean([f_alpha_binary(p, g, alpha2) for p, g in zip(preds, gts)])) if preds else float("nan"),
        "flip_rate": flip,
    }


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    config_hash: str
    rows: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def add(self, variant, seed, metrics, runtime_s, round_idx=0):
        row = {"experiment": self.experiment, "variant": variant, "round": round_idx, "seed": seed,
               "runtime_s": runtime_s}
        row.update({k: metrics.get(k, float("nan")) for k in CSV_FIELDS[4:9]})
        self.rows.append(row)
        return row

    def variant_rows(self, variant):
        return [r for r in self.rows if r["variant"] == variant]

    def csv_text(self, runtime=True):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(CSV_FIELDS), lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            out = {k: r[k] for k in CSV_FIELDS}
            for k in CSV_FIELDS[4:]:
                out[k] = "" if out[k] is None else f"{out[k]:.6f}"
            if not runtime:
                out["runtime_s"] = ""
            w.writerow(out)
        return buf.getvalue()

    def to_json(self):
        return {"experiment": self.experiment, "config_hash": self.config_hash, "config": self.config,
                "rows": self.rows, "extra": self.extra}

    def save(self, stem, runtime=True):
        with open(stem + ".csv", "w", newline="") as f:
            f.write(self.csv_text(runtime))
        with open(stem + ".json", "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True, default=float)


def _report(name, cfg):
    return ExperimentReport(name, cfg.to_flat(), cfg.digest())


def dynamic_predictions(phi, corpus, flows):
    preds, gts = [], []
    for s, seq in enumerate(corpus):
        preds.extend(canonical_foreground(predict_sequence(phi, seq, flows, s)) > 0.5)
        gts.extend(seq.masks)
    return preds, gts


def _split(corpus, val):
    if val is not None:
        return corpus, val
    n = max(1, len(corpus) // 5)
    return corpus[:-n], corpus[-n:]


def ablation_tc(corpus, cfg, val=None, seeds=(0,), lambdas=None):
    """Dynamic model with and without the temporal-consistency term.

    ``lambdas`` are the term weights tried, variants ``tc=<weight>``; by
    default the configured weight and 1.0. Every variant of a seed starts from
    the same weights and sees the same pairs.
    """
    train, val = _split(corpus, val)
    report = _report("ablate-tc", cfg)
    if lambdas is None:
        lambdas = sorted({abs(cfg.dynamic.lambda_tc) or 0.1, 1.0})
    variants = [(f"tc={lam:g}", abs(lam)) for lam in lambdas] + [("no_tc", 0.0)]
    flows = FlowProvider(train, cfg.dynamic.flow_source, cfg.flow)
    vflows = FlowProvider(val, cfg.dynamic.flow_source, cfg.flow)
    for seed in seeds:
        for variant, value in variants:
            c = cfg.updated(**{"seed": seed, "dynamic.lambda_tc": value})
            t0 = time.perf_counter()
            phi, psi = make_phi(c, seed), make_psi(c, seed + 1)
            train_dynamic(train, phi, psi, c, seed=seed, flows=flows)
            ev = evaluate_dynamic(phi, val, vflows)
            preds, gts = dynamic_predictions(phi, val, vflows)
            m = seg_metrics(preds, gts, c.static.alpha2, ev["flip_rate"])
            report.add(variant, seed, m, time.perf_counter() - t0)
            log.info("ablate-tc seed %d %s: %s", seed, variant, m)
    return report


# -- confidence ---------------------------------------------------------------------
def frame_informative(seq, t):
    """Whether the flow phi sees at frame t (to the next frame, last frame to the
    previous) carries relative motion of the sprite."""
    return seq.informative(t, t + 1 if t + 1 < seq.n_frames else t - 1)


def confidence_histograms(labels, corpus, bins=20):
    inf = np.array([frame_informative(corpus[s], t) for s, t in (p.frame for p in labels)], dtype=bool)
    conf = np.array([p.confidence for p in labels], dtype=np.float64)
    edges = np.linspace(0.0, 2.0, bins + 1)
    out = {"edges": edges.tolist()}
    for name, sel in (("informative", inf), ("uninformative", ~inf)):
        vals = conf[sel]
        out[name] = {"count": int(sel.sum()), "mean": float(vals.mean()) if sel.any() else float("nan"),
                     "hist": np.histogram(np.clip(vals, 0, 2), edges)[0].tolist()}
    out["gap"] = out["informative"]["mean"] - out["uninformative"]["mean"]
    return out


def corrupt_uninformative(labels, corpus, psi, cfg, flows, rng):
    """Replace the pseudo-label of every uninformative frame by phi's mask from an
    informative frame of another sequence: a confidently drawn object at the wrong
    place, as a motion segmenter produces when the motion carries no information.
    Confidence is recomputed for the replaced masks."""
    inf = [frame_informative(corpus[s], t) for s, t in (p.frame for p in labels)]
    donors = [i for i, ok in enumerate(inf) if ok and labels[i].mask.max() > 0.5]
    out = list(labels)
    if not donors:
        return out, 0
    bad = [i for i, ok in enumerate(inf) if not ok]
    for i in bad:
        s = labels[i].frame[0]
        pool = [d for d in donors if labels[d].frame[0] != s] or donors
        out[i] = PseudoLabel(labels[int(pool[rng.integers(len(pool))])].mask, 0.0, labels[i].frame, labels[i].moving)
    if bad:
        frames = [labels[i].frame for i in bad]
        masks = np.stack([out[i].mask for i in bad])
        images = np.stack([corpus[s].frames[t] for s, t in frames])
        samples = batch_flow_samples(corpus, flows, frames, cfg.dynamic.flow_samples)
        conf = np.atleast_1d(confidence(masks, samples, images, psi, cfg.dynamic.eps))
        for i, c in zip(bad, conf):
            out[i] = PseudoLabel(out[i].mask, max(float(c), 0.0), out[i].frame, out[i].moving)
    return out, len(bad)


def static_eval_set(corpus):
    """Frames of a corpus whose sprite differs in appearance from the background."""
    images, gts = [], []
    for seq in corpus:
        if not seq.spec.camouflage:
            images.extend(seq.frames)
            gts.extend(seq.masks)
    return images, gts


def static_metrics(chi, images, gts, alpha2=1.5):
    return seg_metrics([segment_static(chi, im) > 0.5 for im in images], gts, alpha2)


def ablation_confidence(corpus, cfg, val=None, seeds=(0,), corrupt=True):
    """Gated versus ungated static distillation from the same phi and psi."""
    train, val = _split(corpus, val)
    report = _report("ablate-confidence", cfg)
    flows = FlowProvider(train, cfg.dynamic.flow_source, cfg.flow)
    images, gts = static_eval_set(val)
    hists = []
    for seed in seeds:
        c = cfg.updated(seed=seed)
        t0 = time.perf_counter()
        phi, psi = make_phi(c, seed), make_psi(c, seed + 1)
        train_dynamic(train, phi, psi, c, seed=seed, flows=flows)
        labels = pseudo_labels(phi, psi, train, c, flows)
        hist = confidence_histograms(labels, train)
        n_bad = 0
        if corrupt:
            labels, n_bad = corrupt_uninformative(labels, train, psi, c, flows, np.random.default_rng(seed))
        hist["corrupted_frames"] = n_bad
        hist["total_frames"] = len(labels)
        hists.append(hist)
        shared = time.perf_counter() - t0
        for variant, gated in (("gated", True), ("ungated", False)):
            cv = c.updated(**{"static.gated": gated})
            t1 = time.perf_counter()
            chi = make_chi(cv, seed + 2)
            train_static(train, phi, psi, chi, 1, cv, seed=seed, flows=flows, pseudo=labels)
            m = static_metrics(chi, images, gts, cv.static.alpha2)
            report.add(variant, seed, m, shared + time.perf_counter() - t1)
            log.info("ablate-confidence seed %d %s: %s", seed, variant, m)
    report.extra["histograms"] = hists
    return report


# -- growing corpus -------------------------------------------------------------------
def growing_corpus_study(corpus_sizes, cfg, seeds=(0, 1, 2), heldout=None, mix=None, families=None):
    """Full bootstrap on nested corpora of increasing size, static mIoU on a
    fixed held-out image set. Seeds change which videos are sampled; network
    initialization follows ``cfg.seed`` for every run."""
    sizes = sorted(int(n) for n in corpus_sizes)
    if not sizes or sizes[0] < 1:
        raise ValueError("corpus sizes must be positive")
    d = cfg.data
    mix = mix or d.mix
    families = tuple(families or d.families)
    if heldout is None:
        heldout = generate_corpus(16, mix, seed=10_000 + cfg.seed, height=d.height, width=d.width,
                                  n_frames=d.n_frames)
    images, gts = static_eval_set(heldout)
    fam = [seq.spec.background_texture in families and seq.spec.sprite_texture in families
           for seq in heldout if not seq.spec.camouflage for _ in range(seq.n_frames)]
    fam = np.array(fam, dtype=bool)
    report = _report("corpus-study", cfg)
    report.extra["sizes"] = sizes
    report.extra["heldout_frames"] = len(images)
    report.extra["heldout_unseen_frames"] = int((~fam).sum())
    for seed in seeds:
        pool = generate_corpus(sizes[-1], mix, seed=20_000 + seed, height=d.height, width=d.width,
                               n_frames=d.n_frames, families=families)
        for n in sizes:
            t0 = time.perf_counter()
            state = run_bootstrap(pool[:n], cfg)
            _, _, chi = restore(state, cfg)
            preds = [segment_static(chi, im) > 0.5 for im in images]
            m = seg_metrics(preds, gts, cfg.static.alpha2)
            row = report.add(f"n={n}", seed, m, time.perf_counter() - t0, round_idx=state.round)
            row["size"] = n
            per = np.array([miou(p, g) for p, g in zip(preds, gts)])
            row["miou_seen"] = float(per[fam].mean()) if fam.any() else float("nan")
            row["miou_unseen"] = float(per[~fam].mean()) if (~fam).any() else float("nan")
            log.info("corpus-study seed %d n=%d: %s", seed, n, m)
    summary = []
    for n in sizes:
        v = np.array([r["miou"] for r in report.rows if r["size"] == n])
        summary.append({"size": n, "mean": float(v.mean()), "std": float(v.std())})
    report.extra["summary"] = summary
    return report
