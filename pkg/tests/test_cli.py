import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from dystab.cli import main
from dystab.flow import write_flo
from dystab.synthdata import load_corpus

TINY = {"data.height": 16, "data.width": 16, "data.n_frames": 3, "data.n_sequences": 3,
        "data.mix": {"plain": 1.0}, "dynamic.widths": [4, 8, 8, 8], "static.widths": [4, 8, 8, 8],
        "dynamic.epochs": 1, "static.epochs": 1, "bootstrap.dynamic_epochs": 1}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["gen-data", "--config", str(cfg), "--seed", "1", "--out", str(root / "data")]) == 0
    return root, str(cfg)


def test_unknown_flag_prints_usage(capsys):
    assert main(["eval", "--data", "d", "--pred", "p", "--out", "o.csv", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "--bogus" in err


def test_missing_command_and_required_option(capsys):
    assert main([]) == 1
    assert main(["train-dynamic", "--out", "x"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_bad_config_is_validation_error(tmp_path, workspace):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dynamic.nope": 1}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1
    assert main(["gen-data", "--set", "data.height=300", "--out", str(tmp_path / "d")]) == 1
    assert main(["train-dynamic", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1


def test_runtime_failure_exit_code(tmp_path):
    # 24x24 frames cannot pass through the 4-level encoder
    odd = tmp_path / "odd.json"
    odd.write_text(json.dumps(dict(TINY, **{"data.height": 24, "data.width": 24})))
    assert main(["gen-data", "--config", str(odd), "--out", str(tmp_path / "d")]) == 0
    assert main(["train-dynamic", "--config", str(odd), "--data", str(tmp_path / "d"),
                 "--out", str(tmp_path / "o")]) == 2


def test_gen_data_from_spec(tmp_path):
    spec = {"height": 16, "width": 16, "n_frames": 3, "shape": "disk", "radius": 3.0, "sprite_texture": 1,
            "background_texture": 4, "start": [7.0, 8.0], "velocities": [[1.0, 0.0], [1.0, 0.0]],
            "pan": [0.0, 0.0], "camouflage": False, "motion_mode": "moving", "static_after": 0, "seed": 5}
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec))
    assert main(["gen-data", "--spec", str(path), "--out", str(tmp_path / "d")]) == 0
    (seq,) = load_corpus(tmp_path / "d")
    assert seq.frames.shape == (3, 16, 16, 3)
    spec["velocities"] = [[20.0, 0.0]] * 2
    path.write_text(json.dumps(spec))
    assert main(["gen-data", "--spec", str(path), "--out", str(tmp_path / "e")]) == 1


def test_viz_flow_zero_is_white(tmp_path):
    flo = tmp_path / "z.flo"
    write_flo(np.zeros((5, 6, 2)), flo)
    assert main(["viz-flow", str(flo), "--out", str(tmp_path / "z.png")]) == 0
    img = np.asarray(Image.open(tmp_path / "z.png"))
    assert img.shape == (5, 6, 3) and img.dtype == np.uint8 and (img == 255).all()
    (tmp_path / "bad.flo").write_bytes(b"garbage!")
    assert main(["viz-flow", str(tmp_path / "bad.flo")]) == 1


def test_eval_ground_truth_predictions(workspace, tmp_path):
    root, cfg = workspace
    data = root / "data"
    for seq_dir in data.iterdir():
        out = tmp_path / "pred" / seq_dir.name
        out.mkdir(parents=True)
        for m in seq_dir.glob("mask_*.png"):
            (out / m.name).write_bytes(m.read_bytes())
    csv_path = tmp_path / "eval.csv"
    assert main(["eval", "--data", str(data), "--pred", str(tmp_path / "pred"), "--out", str(csv_path)]) == 0
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "experiment,variant,round,seed,miou,precision,recall,f_alpha,flip_rate,runtime_s"
    row = dict(zip(lines[0].split(","), lines[1].split(",")))
    assert float(row["miou"]) == 1.0 and float(row["f_alpha"]) == 1.0
    assert json.loads((tmp_path / "eval.json").read_text())["rows"][0]["miou"] == 1.0


def test_training_pipeline_and_determinism(workspace, tmp_path):
    root, cfg = workspace
    data = str(root / "data")
    outs = []
    for i in range(2):
        d = tmp_path / f"run{i}"
        assert main(["train-dynamic", "--config", cfg, "--seed", "3", "--data", data, "--val", data,
                     "--out", str(d / "dyn")]) == 0
        assert main(["train-static", "--config", cfg, "--seed", "3", "--data", data, "--dynamic", str(d / "dyn"),
                     "--out", str(d / "stat")]) == 0
        files = ["dyn/phi.ckpt", "dyn/psi.ckpt", "dyn/train_log.csv", "stat/chi.ckpt", "stat/static_log.csv"]
        outs.append([(d / f).read_bytes() for f in files])
    assert outs[0] == outs[1]
    log_header = (tmp_path / "run0/dyn/train_log.csv").read_text().splitlines()[0]
    assert log_header == "epoch,L_A,L_TC,val_miou,flip_rate"
    for ckpt in ("dyn/phi.ckpt", "stat/chi.ckpt"):
        assert main(["eval", "--config", cfg, "--data", data, "--checkpoint", str(tmp_path / "run0" / ckpt),
                     "--out", str(tmp_path / "e.csv")]) == 0
    frames = sorted((root / "data").iterdir())[0]
    assert main(["infer", "--config", cfg, "--checkpoint", str(tmp_path / "run0/stat/chi.ckpt"),
                 "--input", str(frames), "--out", str(tmp_path / "masks")]) == 0
    assert len(list((tmp_path / "masks").glob("mask_frame_*.png"))) == 3
    assert main(["infer", "--config", cfg, "--checkpoint", str(tmp_path / "run0/dyn/phi.ckpt"),
                 "--input", str(frames), "--out", str(tmp_path / "dmasks")]) == 0
    assert main(["infer", "--config", cfg, "--checkpoint", str(tmp_path / "run0/dyn/train_log.csv"),
                 "--input", str(frames), "--out", str(tmp_path / "x")]) == 1


def test_bootstrap_three_rounds(workspace, tmp_path):
    root, cfg = workspace
    data = str(root / "data")
    digests = []
    for i in range(2):
        out = tmp_path / f"b{i}"
        assert main(["bootstrap", "--config", cfg, "--data", data, "--val", data, "--rounds", "3",
                     "--out", str(out)]) == 0
        manifest = json.loads((out / "bootstrap_state.json").read_text())
        assert manifest["round"] == 3
        for k in (1, 2, 3):
            for name in ("phi", "psi", "chi"):
                assert (out / f"round_{k}" / f"{name}.ckpt").is_file()
        rows = (out / "metrics.csv").read_text().splitlines()
        assert len(rows) == 4
        digests.append([(out / f"round_3/{n}.ckpt").read_bytes() for n in ("phi", "psi", "chi")]
                       + [(out / "metrics.csv").read_bytes()])
    assert digests[0] == digests[1]
    assert main(["bootstrap", "--config", cfg, "--data", data, "--rounds", "-1", "--out", str(tmp_path / "n")]) == 1


def test_ablation_csv_is_reproducible(workspace, tmp_path):
    root, cfg = workspace
    texts = []
    for i in range(2):
        out = tmp_path / f"a{i}"
        assert main(["ablate-tc", "--config", cfg, "--data", str(root / "data"), "--seeds", "0",
                     "--omit-runtime", "--out", str(out)]) == 0
        texts.append((out / "ablate-tc.csv").read_text())
    assert texts[0] == texts[1]
    rows = texts[0].splitlines()
    assert [r.split(",")[1] for r in rows[1:]] == ["tc=0.1", "tc=1", "no_tc"]
    assert all(r.endswith(",") for r in rows[1:])


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "dystab", "--bogus"], capture_output=True, text=True)
    assert res.returncode == 1 and "usage:" in res.stderr
