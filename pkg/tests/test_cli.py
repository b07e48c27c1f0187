import csv
import json
from pathlib import Path

import numpy as np
import pytest

from motionlift import core_types as ct
from motionlift.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({
        "generator": {"n_sequences": 6, "frames": 8},
        "train": {"steps": 20, "batch_size": 4, "F_max": 8,
                  "model": {"model_dim": 16, "layers": 1, "heads": 2}},
        "sampler": {"N": 8},
    }))
    assert main(["synth", "--config", str(cfg), "--seed", "1", "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--seed", "1", "--data", str(root / "data"),
                 "--out", str(root / "train")]) == 0
    return root, cfg


def files(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def sample_args(root, cfg, out, *extra):
    d = root / "data"
    return ["sample", "--config", str(cfg), "--seed", "2",
            "--checkpoint", str(root / "train" / "checkpoint.plty"),
            "--obs", str(d / "observations" / "seq_00000.obs2d"),
            "--root", str(d / "motions" / "seq_00000.mseq"),
            "--camera-dir", str(d / "cameras"), "--out", str(out), *extra]


def test_synth_layout_and_manifest(workdir):
    root, _ = workdir
    d = root / "data"
    manifest = json.loads((d / "manifest.json").read_text())
    assert len([f for f in manifest["files"] if f.startswith("motions/")]) == 6
    assert all((d / f).is_file() for f in manifest["files"])
    assert json.loads((d / "config.json").read_text())["generator"]["n_sequences"] == 6
    assert len(ct.read_observations(d / "observations" / "seq_00003.obs2d")) == 4


def test_synth_rerun_is_byte_identical(workdir, tmp_path):
    root, cfg = workdir
    assert main(["synth", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "again")]) == 0
    assert files(tmp_path / "again") == files(root / "data")


def test_unknown_config_key_names_key(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"generator": {"n_sequencez": 3}}))
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--config", str(bad), "--seed", "0", "--out", str(tmp_path / "o")])
    assert exc.value.code != 0
    assert "n_sequencez" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_seed_is_required(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--out", str(tmp_path / "o")])
    assert exc.value.code == 2


def test_train_writes_loss_curve(workdir):
    root, _ = workdir
    rows = list(csv.reader((root / "train" / "loss.csv").open()))
    assert rows[0] == ["step", "loss"] and len(rows) == 21


def test_train_resume_matches(workdir, tmp_path):
    root, cfg = workdir
    data = str(root / "data")
    assert main(["train", "--config", str(cfg), "--seed", "1", "--data", data, "--steps", "10",
                 "--out", str(tmp_path / "half")]) == 0
    assert main(["train", "--config", str(cfg), "--seed", "1", "--data", data,
                 "--resume", str(tmp_path / "half" / "checkpoint.plty"),
                 "--out", str(tmp_path / "resumed")]) == 0
    assert ((tmp_path / "resumed" / "checkpoint.plty").read_bytes()
            == (root / "train" / "checkpoint.plty").read_bytes())


def test_train_missing_dataset(tmp_path):
    assert main(["train", "--seed", "0", "--data", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "o")]) != 0
    assert not (tmp_path / "o").exists()


def test_sample_is_deterministic_and_eval_reads_it(workdir, tmp_path, capsys):
    root, cfg = workdir
    gt = str(root / "data" / "motions" / "seq_00000.mseq")
    assert main(sample_args(root, cfg, tmp_path / "a", "--gt", gt)) == 0
    assert main(sample_args(root, cfg, tmp_path / "b", "--gt", gt)) == 0
    fa, fb = files(tmp_path / "a"), files(tmp_path / "b")
    assert {k: v for k, v in fa.items() if k != "config.json"} == \
        {k: v for k, v in fb.items() if k != "config.json"}
    assert len(list((tmp_path / "a" / "hypotheses").glob("*.mseq"))) == 8
    capsys.readouterr()
    assert main(["eval", "--hypotheses", str(tmp_path / "a" / "hypotheses"), "--gt", gt]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) >= {"min_mpjpe", "pa_mpjpe", "mpjve", "ece", "quantiles", "best_index",
                           "n_hypotheses"}
    sampled = json.loads((tmp_path / "a" / "report.json").read_text())["metrics"]
    assert sampled["min_mpjpe"] == pytest.approx(report["min_mpjpe"])


def test_sample_zero_hypotheses_is_usage_error(workdir, tmp_path):
    root, cfg = workdir
    with pytest.raises(SystemExit) as exc:
        main(sample_args(root, cfg, tmp_path / "z", "--hypotheses", "0"))
    assert exc.value.code == 2
    assert not (tmp_path / "z").exists()


def test_sample_confidence_modes(workdir, tmp_path):
    root, cfg = workdir
    gt = str(root / "data" / "motions" / "seq_00000.mseq")
    for mode in ("file", "oracle"):
        assert main(sample_args(root, cfg, tmp_path / mode, "--confidence-mode", mode,
                                "--gt", gt, "--cameras", "cam1")) == 0
    with pytest.raises(SystemExit):
        main(sample_args(root, cfg, tmp_path / "x", "--confidence-mode", "oracle"))


def test_eval_of_gt_copies_is_zero(workdir, tmp_path):
    root, _ = workdir
    gt = ct.read_motion(root / "data" / "motions" / "seq_00001.mseq")
    h = ct.HypothesisSet.from_array(np.repeat(gt.positions[None], 8, 0).astype(np.float64),
                                    gt.root_trajectory, gt.root_index)
    ct.write_hypotheses(h, tmp_path / "h")
    assert main(["eval", "--hypotheses", str(tmp_path / "h"),
                 "--gt", str(root / "data" / "motions" / "seq_00001.mseq"),
                 "--out", str(tmp_path / "e")]) == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert rep["min_mpjpe"] == 0 and rep["pa_mpjpe"] == pytest.approx(0, abs=1e-6)
    assert rep["mpjve"] == 0


def test_eval_malformed_file(workdir, tmp_path, capsys):
    root, _ = workdir
    (tmp_path / "h").mkdir()
    (tmp_path / "h" / "h_0000.mseq").write_bytes(b"MSEQ\x01\x00")
    code = main(["eval", "--hypotheses", str(tmp_path / "h"),
                 "--gt", str(root / "data" / "motions" / "seq_00001.mseq")])
    assert code != 0
    assert "CorruptHeader" in capsys.readouterr().err


@pytest.mark.parametrize("kind,values,table,header", [
    ("steps", "2,4", "steps.csv", ["steps", "T", "S", "wall_time", "min_mpjpe"]),
    ("hypotheses", "1,4,8", "hypotheses.csv", ["N", "min_mpjpe"]),
    ("confidence", None, "confidence.csv", ["instance", "seed", "confidence", "min_mpjpe", "ece"]),
])
def test_ablation_tables(workdir, tmp_path, kind, values, table, header):
    root, cfg = workdir
    args = ["ablate", kind, "--config", str(cfg), "--seed", "4",
            "--checkpoint", str(root / "train" / "checkpoint.plty"), "--data", str(root / "data"),
            "--instances", "2", "--out", str(tmp_path / kind)]
    if values:
        args += ["--values", values]
    assert main(args) == 0
    rows = list(csv.reader((tmp_path / kind / table).open()))
    assert rows[0] == header
    if kind == "steps":
        assert [int(r[0]) for r in rows[1:]] == [2, 4]
    if kind == "hypotheses":
        errs = [float(r[1]) for r in rows[1:]]
        assert all(b <= a for a, b in zip(errs, errs[1:]))
    if kind == "confidence":
        modes = [r[2] for r in rows[1:]]
        assert modes == ["off", "on"] * 2


def test_toy_outputs(tmp_path):
    assert main(["toy", "--seed", "0", "--seeds", "3", "--out", str(tmp_path / "toy")]) == 0
    rows = list(csv.reader((tmp_path / "toy" / "strategies.csv").open()))
    assert rows[0] == ["variant", "strategy1", "strategy2"]
    assert rows[1][1] == rows[2][1]  # per-frame selection ignores shuffling
    post = list(csv.reader((tmp_path / "toy" / "posterior.csv").open()))
    assert post[0][:3] == ["x", "mean", "std"] and len(post) == 201


def test_existing_output_rejected(tmp_path):
    (tmp_path / "full").mkdir()
    (tmp_path / "full" / "x").write_text("keep")
    with pytest.raises(SystemExit):
        main(["toy", "--seed", "0", "--seeds", "1", "--out", str(tmp_path / "full")])
    assert (tmp_path / "full" / "x").read_text() == "keep"
