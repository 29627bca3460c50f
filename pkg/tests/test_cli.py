import csv
import json

import numpy as np
import pytest

from liftadapt.cli import main
from liftadapt.data import load_dataset

TRAIN = ["--hidden_dim", "16", "--noise-dim", "4", "--batch-size", "16"]


def run(*argv):
    return main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--seed", 7, "--n-source", 300, "--n-target", 120, "--out", root / "s") == 0
    assert run("pretrain", "--seed", 7, "--source", root / "s/source.jsonl", "--epochs", 3,
               *TRAIN, "--out", root / "p") == 0
    return root


def test_synth_counts_and_determinism(world, tmp_path):
    s = world / "s"
    assert len(load_dataset(s / "source.jsonl")) == 300
    tar = load_dataset(s / "target.jsonl")
    assert len(tar) == 120 and not tar.any_3d
    assert load_dataset(s / "target.gt.jsonl").has_3d
    assert run("synth", "--seed", 7, "--n-source", 300, "--n-target", 120, "--out", tmp_path) == 0
    for name in ("source.jsonl", "target.jsonl", "target.gt.jsonl", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (s / name).read_bytes()
    man = json.loads((s / "manifest.json").read_text())
    assert man["seed"] == 7 and man["command"] == "synth" and "version" in man


def test_pretrain_loss_trend(world, tmp_path):
    assert run("pretrain", "--seed", 2, "--source", world / "s/source.jsonl", "--epochs", 4,
               "--pretrain-iters", 50, *TRAIN, "--out", tmp_path) == 0
    ema = [float(r["ema50"]) for r in rows(tmp_path / "pretrain_loss.csv")]
    q = len(ema) // 4
    assert len(ema) == 200 and np.mean(ema[-q:]) < np.mean(ema[:q])


def test_pretrain_resume_bitwise(world, tmp_path):
    src = world / "s/source.jsonl"
    assert run("pretrain", "--seed", 7, "--source", src, "--epochs", 1, *TRAIN,
               "--out", tmp_path / "a") == 0
    assert run("pretrain", "--seed", 7, "--source", src, "--epochs", 3, *TRAIN,
               "--resume", tmp_path / "a/lifter.ckpt", "--out", tmp_path / "b") == 0
    whole = rows(world / "p/pretrain_loss.csv")
    resumed = rows(tmp_path / "b/pretrain_loss.csv")
    first_resumed = next(r for r in whole if r["epoch"] == "1")
    assert resumed[0]["loss_mm2"] == first_resumed["loss_mm2"]
    assert (tmp_path / "b/lifter.ckpt").read_bytes() == (world / "p/lifter.ckpt").read_bytes()


def test_pretrain_missing_labels(world, tmp_path, capsys):
    assert run("pretrain", "--seed", 1, "--source", world / "s/target.jsonl",
               "--out", tmp_path) == 2
    assert "MissingLabels" in capsys.readouterr().err


def _adapt(world, out, *extra):
    return run("adapt", "--seed", 7, "--checkpoint", world / "p/lifter.ckpt",
               "--source", world / "s/source.jsonl", "--target", world / "s/target.jsonl",
               "--iters-per-epoch", 6, "--warmup-epochs", 1, *TRAIN, *extra, "--out", out)


@pytest.mark.parametrize("mode", ["gpa-only", "lpa-only"])
def test_adapt_modes_emit_reports(world, tmp_path, mode):
    assert _adapt(world, tmp_path, "--mode", mode, "--epochs", 2) == 0
    lines = (tmp_path / "report.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["mode"] == mode and len(lines) == 3
    for name in ("lifter.ckpt", "generator.ckpt", "discriminator.ckpt", "alignment.csv",
                 "alignment_summary.csv", "timing.json", "manifest.json"):
        assert (tmp_path / name).exists()


def test_adapt_alignment_csv(world, tmp_path):
    assert _adapt(world, tmp_path, "--epochs", 0) == 0
    mean = {(r["quantity"], r["series"]): float(r["mean"])
            for r in rows(tmp_path / "alignment_summary.csv")}
    tar = mean["scale", "target"]
    assert abs(mean["scale", "gpa_source"] - tar) / tar < 0.05
    assert abs(mean["scale", "source"] - tar) / tar >= 0.20
    hist = rows(tmp_path / "alignment.csv")
    assert {r["quantity"] for r in hist} == {"scale", "root_x", "root_y"}
    counts = sum(int(r["count"]) for r in hist if r["quantity"] == "scale"
                 and r["series"] == "target")
    assert counts == 120


def test_adapt_zero_epochs_keeps_checkpoint(world, tmp_path):
    assert _adapt(world, tmp_path, "--epochs", 0) == 0
    assert (tmp_path / "lifter.ckpt").read_bytes() == (world / "p/lifter.ckpt").read_bytes()


@pytest.mark.parametrize("target,err", [("source.jsonl", "LabelLeak"),
                                        ("target.gt.jsonl", "LabelLeak")])
def test_adapt_rejects_bad_target(world, tmp_path, capsys, target, err):
    assert run("adapt", "--seed", 7, "--checkpoint", world / "p/lifter.ckpt",
               "--source", world / "s/source.jsonl", "--target", world / "s" / target,
               "--out", tmp_path) == 2
    assert err in capsys.readouterr().err


def test_eval_gt_stub_and_repeatability(world, tmp_path):
    tar = world / "s/target.jsonl"
    assert run("eval", "--predictions", world / "s/target.gt.jsonl", "--target", tar,
               "--out", tmp_path / "stub") == 0
    rep = json.loads((tmp_path / "stub/eval.json").read_text())
    assert (rep["mpjpe"], rep["pck"], rep["auc"]) == (0.0, 100.0, 100.0)
    for k in ("a", "b"):
        assert run("eval", "--checkpoint", world / "p/lifter.ckpt", "--target", tar,
                   "--out", tmp_path / k) == 0
    a = json.loads((tmp_path / "a/eval.json").read_text())
    assert (tmp_path / "a/eval.json").read_bytes() == (tmp_path / "b/eval.json").read_bytes()
    assert a["mpjpe"] >= 0 and 0 <= a["pck"] <= 100 and 0 <= a["auc"] <= 100
    assert a["count"] == 120 and a["threshold_mm"] == 150.0


def test_eval_missing_sidecar(world, tmp_path):
    (tmp_path / "t.jsonl").write_bytes((world / "s/target.jsonl").read_bytes())
    assert run("eval", "--checkpoint", world / "p/lifter.ckpt", "--target", tmp_path / "t.jsonl",
               "--out", tmp_path / "o") == 2
    assert run("eval", "--target", tmp_path / "t.jsonl", "--out", tmp_path / "o") == 2


def _worked_files(tmp_path):
    cam = {"fx": 1000.0, "fy": 1000.0, "cx": 500.0, "cy": 500.0, "width": 1000.0,
           "height": 1000.0}
    rng = np.random.default_rng(0)
    pose = np.zeros((16, 3))
    pose[1:, :2] = rng.uniform(-400, 400, (15, 2))  # flat pose: the approximation is exact
    px = pose[:, :2] * 1000.0 / 4000.0 + 500.0
    src = {"id": "s0", "camera": cam, "joints_2d": px.tolist(), "joints_3d": pose.tolist()}
    tar = {"id": "t0", "camera": cam, "joints_2d": px.tolist()}
    (tmp_path / "src.jsonl").write_text(json.dumps(src) + "\n")
    (tmp_path / "tar.jsonl").write_text(json.dumps(tar) + "\n")


def test_gpa_worked_example(tmp_path):
    _worked_files(tmp_path)
    assert run("gpa", "--source", tmp_path / "src.jsonl", "--target", tmp_path / "tar.jsonl",
               "--out", tmp_path / "g") == 0
    (row,) = rows(tmp_path / "g/gpa.csv")
    assert float(row["Z_mm"]) == pytest.approx(4000.0, rel=1e-12)
    assert abs(float(row["X_mm"])) < 1e-9 and abs(float(row["Y_mm"])) < 1e-9


def test_gpa_residual_within_bound(world, tmp_path):
    assert run("gpa", "--source", world / "s/source.jsonl", "--target", world / "s/target.jsonl",
               "--shuffle", "--seed", 3, "--out", tmp_path) == 0
    table = rows(tmp_path / "gpa.csv")
    assert len(table) == 300 and not any(r["flag"] for r in table)
    assert all(float(r["residual"]) <= float(r["bound"]) for r in table)


def test_gpa_empty_target(world, tmp_path, capsys):
    (tmp_path / "empty.jsonl").write_text("")
    assert run("gpa", "--source", world / "s/source.jsonl", "--target", tmp_path / "empty.jsonl",
               "--out", tmp_path / "g") == 2
    assert "Empty" in capsys.readouterr().err


def test_project_and_manifest(world, tmp_path):
    assert run("project", "--source", world / "s/source.jsonl", "--target",
               world / "s/target.jsonl", "--out", tmp_path) == 0
    proj = load_dataset(tmp_path / "projected.jsonl")
    assert len(proj) == 300 and proj.has_3d
    assert json.loads((tmp_path / "manifest.json").read_text())["command"] == "project"


def test_bad_config_file(world, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"nonsense": 1}}))
    assert run("pretrain", "--seed", 1, "--source", world / "s/source.jsonl",
               "--config", tmp_path / "c.json", "--out", tmp_path / "o") == 2
    assert main(["frobnicate"]) == 2
