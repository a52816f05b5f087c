"""Command-line entry point: ``dystab <command> [options]``.

Exit status 0 on success, 1 for invalid arguments or inputs, 2 when a run fails.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
import time

import numpy as np
from PIL import Image

from . import flow as flowlib
from .batching import FlowProvider, to_nchw
from .bootstrap import run_bootstrap
from .config import ConfigError, TrainConfig
from .dynamic import evaluate_dynamic, make_phi, make_psi, train_dynamic
from .experiments import (ExperimentReport, ablation_confidence, ablation_tc, dynamic_predictions,
                          growing_corpus_study, seg_metrics)
from .metrics import canonical_foreground
from .nn import CheckpointError, ParamStore
from .static import make_chi, segment_static, train_static
from .synthdata import SceneSpec, SpecError, generate_corpus, generate_sequence, load_corpus, save_corpus
from .tensor import Tensor, no_grad

log = logging.getLogger("dystab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


VALIDATION_ERRORS = (UsageError, ConfigError, SpecError, CheckpointError, flowlib.FlowFormatError,
                     FileNotFoundError, json.JSONDecodeError)


def _common(p):
    p.add_argument("--config", help="JSON file of flat dotted config keys")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="single config override, e.g. dynamic.epochs=5 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="dystab", description="Unsupervised object segmentation by dynamic-static bootstrapping.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic corpus to a dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="SceneSpec JSON for a single sequence")
    p.add_argument("--n", type=int, help="number of sequences (default data.n_sequences)")

    p = sub.add_parser("train-dynamic", help="adversarial motion segmentation training")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-static", help="distill the static model from a trained dynamic model")
    p.add_argument("--data", required=True)
    p.add_argument("--dynamic", required=True, help="directory holding phi.ckpt and psi.ckpt")
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="chi checkpoint to continue from")
    p.add_argument("--round", type=int, default=1)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("bootstrap", help="full dynamic-static bootstrapping")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--rounds", type=int)

    p = sub.add_parser("eval", help="metrics of a checkpoint or of mask PNGs on a dataset")
    p.add_argument("--data", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--pred", help="directory of <sequence>/mask_XXXX.png predictions")
    p.add_argument("--out", required=True, help="CSV path; a JSON report is written next to it")

    p = sub.add_parser("infer", help="mask PNGs from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, nargs="+", help="image files (frames, in order) or a directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("viz-flow", help="render a .flo file with the standard color wheel")
    p.add_argument("flo")
    p.add_argument("--out")

    for name, helptext in (("ablate-tc", "temporal-consistency ablation"),
                           ("ablate-confidence", "confidence-gating ablation"),
                           ("corpus-study", "growing-corpus study")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--data", help="dataset directory (default: generated from data.* config)")
        p.add_argument("--seeds", type=int, nargs="+")
        p.add_argument("--omit-runtime", action="store_true",
                       help="leave runtime_s empty so repeated runs give identical files")
        if name == "corpus-study":
            p.add_argument("--sizes", type=int, nargs="+", default=[4, 8, 16, 32])

    for p in sub.choices.values():
        _common(p)
    return parser


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args):
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    flat = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        flat[key] = _parse_value(value)
    if args.seed is not None:
        flat["seed"] = args.seed
    return cfg.updated(**flat) if flat else cfg


def _dataset(path):
    if not os.path.isdir(path):
        raise FileNotFoundError(f"dataset directory not found: {path}")
    corpus = load_corpus(path)
    if not corpus:
        raise FileNotFoundError(f"no sequences under {path}")
    return corpus


def _load_params(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return ParamStore.load(path)


def _segnet_from(params, cfg):
    """phi or chi network for a checkpoint, told apart by input channel count."""
    if "enc0.w" not in params:
        raise CheckpointError("checkpoint does not hold a segmentation network")
    in_ch = params["enc0.w"].shape[1]
    if in_ch == 2:
        net = make_phi(cfg)
    elif in_ch == 3:
        net = make_chi(cfg)
    else:
        raise CheckpointError(f"unexpected input channel count {in_ch}")
    net.params.load_from(params)
    return net


def _write_mask(path, mask):
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255).save(path)


# -- commands ---------------------------------------------------------------------------
def cmd_gen_data(args, cfg):
    d = cfg.data
    if args.spec:
        with open(args.spec) as f:
            spec = SceneSpec.from_json(json.load(f))
        spec.validate()
        corpus = [generate_sequence(spec, "seq_0000")]
    else:
        n = d.n_sequences if args.n is None else args.n
        if n < 1:
            raise ConfigError("--n must be positive")
        corpus = generate_corpus(n, d.mix, seed=cfg.seed, height=d.height, width=d.width,
                                 n_frames=d.n_frames, families=d.families)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} sequences to {args.out}")


def cmd_train_dynamic(args, cfg):
    corpus = _dataset(args.data)
    val = _dataset(args.val) if args.val else None
    os.makedirs(args.out, exist_ok=True)
    phi, psi = make_phi(cfg, cfg.seed), make_psi(cfg, cfg.seed + 1)
    rows = train_dynamic(corpus, phi, psi, cfg, epochs=args.epochs, val=val,
                         log_path=os.path.join(args.out, "train_log.csv"))
    phi.params.save(os.path.join(args.out, "phi.ckpt"))
    psi.params.save(os.path.join(args.out, "psi.ckpt"))
    if rows:
        print(json.dumps(rows[-1]))


def cmd_train_static(args, cfg):
    corpus = _dataset(args.data)
    phi, psi = make_phi(cfg), make_psi(cfg)
    phi.params.load_from(_load_params(os.path.join(args.dynamic, "phi.ckpt")))
    psi.params.load_from(_load_params(os.path.join(args.dynamic, "psi.ckpt")))
    chi = make_chi(cfg, cfg.seed + 2)
    if args.init:
        chi.params.load_from(_load_params(args.init))
    if args.round < 1:
        raise ConfigError("--round counts from 1")
    os.makedirs(args.out, exist_ok=True)
    teacher, _ = train_static(corpus, phi, psi, chi, args.round, cfg, epochs=args.epochs,
                              log_path=os.path.join(args.out, "static_log.csv"))
    chi.params.save(os.path.join(args.out, "chi.ckpt"))
    if teacher is not None:
        teacher.params.save(os.path.join(args.out, "teacher.ckpt"))


def cmd_bootstrap(args, cfg):
    if args.rounds is not None:
        if args.rounds < 0:
            raise ConfigError("--rounds must be >= 0")
        cfg = cfg.updated(**{"bootstrap.rounds": args.rounds})
    corpus = _dataset(args.data)
    val = _dataset(args.val) if args.val else None
    state = run_bootstrap(corpus, cfg, val=val, out_dir=args.out)
    report = ExperimentReport("bootstrap", cfg.to_flat(), cfg.digest())
    for m in state.metrics:
        if "fused_miou" in m:
            report.add("fused", cfg.seed, {"miou": m["fused_miou"], "flip_rate": m["flip_rate"]}, 0.0, m["round"])
    report.save(os.path.join(args.out, "metrics"), runtime=False)
    print(f"completed {state.round} rounds; manifest at {os.path.join(args.out, 'bootstrap_state.json')}")


def _pred_masks(pred_dir, corpus):
    preds = []
    for seq in corpus:
        for t in range(seq.n_frames):
            path = os.path.join(pred_dir, seq.seq_id, f"mask_{t:04d}.png")
            if not os.path.isfile(path):
                raise FileNotFoundError(f"missing prediction {path}")
            m = np.asarray(Image.open(path).convert("L")) > 127
            if m.shape != seq.masks[t].shape:
                raise ConfigError(f"prediction {path} has shape {m.shape}, expected {seq.masks[t].shape}")
            preds.append(m)
    return preds


def cmd_eval(args, cfg):
    corpus = _dataset(args.data)
    gts = [m for seq in corpus for m in seq.masks]
    flip = float("nan")
    if args.pred:
        preds, variant = _pred_masks(args.pred, corpus), "masks"
    else:
        net = _segnet_from(_load_params(args.checkpoint), cfg)
        if net.in_ch == 2:
            flows = FlowProvider(corpus, cfg.dynamic.flow_source, cfg.flow)
            preds, _ = dynamic_predictions(net, corpus, flows)
            flip = evaluate_dynamic(net, corpus, flows)["flip_rate"]
            variant = "dynamic"
        else:
            preds = [p > 0.5 for seq in corpus for p in segment_static(net, seq.frames)]
            variant = "static"
    report = ExperimentReport("eval", cfg.to_flat(), cfg.digest())
    report.add(variant, cfg.seed, seg_metrics(preds, gts, cfg.static.alpha2, flip), 0.0)
    stem = os.path.splitext(args.out)[0]
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w", newline="") as f:
        f.write(report.csv_text(runtime=False))
    with open(stem + ".json", "w") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True, default=float)
    print(report.csv_text(runtime=False), end="")


def _read_images(inputs):
    paths = []
    for item in inputs:
        if os.path.isdir(item):
            found = sorted(glob.glob(os.path.join(item, "frame_*.png"))) or sorted(glob.glob(os.path.join(item, "*.png")))
            paths.extend(found)
        elif os.path.isfile(item):
            paths.append(item)
        else:
            raise FileNotFoundError(f"input not found: {item}")
    if not paths:
        raise FileNotFoundError("no input images")
    images = [np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255 for p in paths]
    if len({im.shape for im in images}) != 1:
        raise ConfigError("input images differ in size")
    h, w = images[0].shape[:2]
    if h % 16 or w % 16:
        raise ConfigError(f"image size {h}x{w} is not a multiple of 16")
    return paths, np.stack(images)


def cmd_infer(args, cfg):
    net = _segnet_from(_load_params(args.checkpoint), cfg)
    paths, images = _read_images(args.input)
    if net.in_ch == 2:
        if len(images) < 2:
            raise ConfigError("the dynamic model needs at least two frames")
        fc = cfg.flow
        n = len(images)
        fl = [flowlib.estimate_flow(images[i], images[i + 1 if i + 1 < n else i - 1], fc.levels, fc.iters, fc.alpha)
              for i in range(n)]
        with no_grad():
            raw = net(Tensor(to_nchw(np.stack(fl)))).data[:, 1]
        masks = canonical_foreground(raw) > 0.5
    else:
        masks = segment_static(net, images) > 0.5
    os.makedirs(args.out, exist_ok=True)
    for p, m in zip(paths, masks):
        _write_mask(os.path.join(args.out, "mask_" + os.path.basename(p)), m)
    print(f"wrote {len(masks)} masks to {args.out}")


def cmd_viz_flow(args, cfg):
    f = flowlib.read_flo(args.flo)
    out = args.out or os.path.splitext(args.flo)[0] + ".png"
    rgb = np.round(np.clip(flowlib.flow_to_color(f), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(rgb).save(out)
    print(out)


def _experiment_corpus(args, cfg):
    if args.data:
        return _dataset(args.data)
    d = cfg.data
    return generate_corpus(d.n_sequences, d.mix, seed=cfg.seed, height=d.height, width=d.width,
                           n_frames=d.n_frames, families=d.families)


def _save_report(report, args):
    os.makedirs(args.out, exist_ok=True)
    keep = not args.omit_runtime
    if not keep:
        for r in report.rows:
            r["runtime_s"] = None
    report.save(os.path.join(args.out, report.experiment), runtime=keep)
    print(report.csv_text(keep), end="")


def cmd_ablate_tc(args, cfg):
    corpus = _experiment_corpus(args, cfg)
    _save_report(ablation_tc(corpus, cfg, seeds=tuple(args.seeds or [cfg.seed])), args)


def cmd_ablate_confidence(args, cfg):
    corpus = _experiment_corpus(args, cfg)
    _save_report(ablation_confidence(corpus, cfg, seeds=tuple(args.seeds or [cfg.seed])), args)


def cmd_corpus_study(args, cfg):
    if any(n < 1 for n in args.sizes):
        raise ConfigError("corpus sizes must be positive")
    _save_report(growing_corpus_study(args.sizes, cfg, seeds=tuple(args.seeds or [0, 1, 2])), args)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-dynamic": cmd_train_dynamic,
    "train-static": cmd_train_static,
    "bootstrap": cmd_bootstrap,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "viz-flow": cmd_viz_flow,
    "ablate-tc": cmd_ablate_tc,
    "ablate-confidence": cmd_ablate_confidence,
    "corpus-study": cmd_corpus_study,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage() + "dystab: error: a command is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        cfg = load_config(args)
    except VALIDATION_ERRORS as exc:
        print(str(exc), file=sys.stderr)
        return 1
    t0 = time.perf_counter()
    try:
        COMMANDS[args.command](args, cfg)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure of a run maps to status 2
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
