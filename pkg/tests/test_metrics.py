import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from liftadapt.data import SOURCE_DEFAULT, synth_generate
from liftadapt.errors import DegenerateConfiguration, DimMismatch
from liftadapt.metrics import (AUC_THRESHOLDS_MM, auc, evaluate, joint_errors, mpjpe, pa_mpjpe,
                               pck, procrustes_align)
from oracles import procrustes_oracle

POSES = synth_generate(SOURCE_DEFAULT).joints_3d()


def test_mpjpe_examples():
    g = POSES[0]
    assert mpjpe(g, g) == 0.0
    assert mpjpe(g + [3.0, 4.0, 0.0], g) == pytest.approx(5.0, abs=1e-12)
    perm = np.random.default_rng(0).permutation(16)
    p = POSES[1]
    assert mpjpe(p[perm], g[perm]) == pytest.approx(mpjpe(p, g), rel=1e-14)
    with pytest.raises(DimMismatch):
        mpjpe(g, g[:15])


def test_mpjpe_batched():
    np.testing.assert_allclose(mpjpe(POSES[:5], POSES[5:10]),
                               [mpjpe(a, b) for a, b in zip(POSES[:5], POSES[5:10])])


def test_pa_similarity_copy_is_zero():
    rng = np.random.default_rng(1)
    for g in POSES[:50]:
        R = Rotation.random(random_state=rng).as_matrix()
        p = 0.7 * g @ R.T + rng.normal(0, 300, 3)
        assert pa_mpjpe(p, g) < 1e-9


def test_pa_reflection_disallowed():
    g = POSES[3]
    assert pa_mpjpe(g * [-1.0, 1.0, 1.0], g) > 1.0


def test_pa_degenerate():
    with pytest.raises(DegenerateConfiguration):
        pa_mpjpe(POSES[0], np.zeros((16, 3)))


def test_pa_matches_optimizer_oracle():
    rng = np.random.default_rng(2)
    for _ in range(8):
        g = POSES[rng.integers(len(POSES))]
        p = POSES[rng.integers(len(POSES))] + rng.normal(0, 30, (16, 3))
        # the oracle minimises squared error, the quantity Procrustes optimises
        a = procrustes_align(p, g)
        assert mpjpe(a, g) == pytest.approx(procrustes_oracle(p, g), rel=1e-6)


@settings(max_examples=100, deadline=None)
@given(i=st.integers(0, 1999), j=st.integers(0, 1999), noise=st.floats(0, 200))
def test_alignment_never_increases_rms(i, j, noise):
    rng = np.random.default_rng(i * 2000 + j)
    g, p = POSES[i], POSES[j] + rng.normal(0, noise + 1e-9, (16, 3))
    rms_before = np.sqrt(np.mean(np.sum((p - g) ** 2, axis=-1)))
    rms_after = np.sqrt(np.mean(np.sum((procrustes_align(p, g) - g) ** 2, axis=-1)))
    assert rms_after <= rms_before + 1e-9


def test_metrics_rigid_motion_invariance():
    rng = np.random.default_rng(3)
    p, g = POSES[:20] + rng.normal(0, 40, (20, 16, 3)), POSES[:20]
    R = Rotation.random(random_state=rng).as_matrix()
    t = rng.normal(0, 500, 3)
    p2, g2 = p @ R.T + t, g @ R.T + t
    np.testing.assert_allclose(mpjpe(p2, g2), mpjpe(p, g), rtol=1e-9)
    np.testing.assert_allclose(pa_mpjpe(p2, g2), pa_mpjpe(p, g), rtol=1e-7)
    assert pck(p2, g2) == pck(p, g) and auc(p2, g2) == auc(p, g)


def _with_errors(errs):
    """Pose pairs whose per-joint errors are exactly ``errs`` (mm), along x."""
    errs = np.asarray(errs, float).reshape(-1, 16)
    gt = np.zeros(errs.shape + (3,))
    pred = gt.copy()
    pred[..., 0] = errs
    return pred, gt


def test_pck_examples():
    assert pck(*_with_errors(np.zeros(32))) == 100.0
    assert pck(*_with_errors([0.0] * 8 + [1000.0] * 8), 150.0) == 50.0
    assert pck(*_with_errors(np.full(16, 150.0)), 150.0) == 0.0  # strict
    with pytest.raises(ValueError):
        pck(*_with_errors(np.zeros(16)), 0.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), t1=st.floats(1, 300), t2=st.floats(1, 300))
def test_pck_monotone(seed, t1, t2):
    pred, gt = _with_errors(np.random.default_rng(seed).uniform(0, 300, 64))
    lo, hi = sorted((t1, t2))
    assert pck(pred, gt, lo) <= pck(pred, gt, hi)


def test_auc_examples():
    assert len(AUC_THRESHOLDS_MM) == 30
    assert auc(*_with_errors(np.zeros(16))) == 100.0
    assert auc(*_with_errors(np.full(16, 151.0))) == 0.0
    assert auc(*_with_errors(np.full(16, 75.0))) == 50.0


def test_auc_is_mean_of_pck_grid():
    pred, gt = _with_errors(np.random.default_rng(4).uniform(0, 200, 160))
    err = joint_errors(pred, gt).ravel()
    manual = 0.0
    for t in range(5, 151, 5):
        manual += 100.0 * sum(1 for e in err if e < t) / len(err)
    assert auc(pred, gt) == pytest.approx(manual / 30, rel=1e-12)


def test_evaluate_report(tmp_path):
    rng = np.random.default_rng(5)
    gt = POSES[:30]
    pred = gt + rng.normal(0, 40, gt.shape)
    rep = evaluate(pred, gt, [f"r{i}" for i in range(30)])
    assert rep.mpjpe == pytest.approx(float(np.mean(mpjpe(pred, gt))))
    assert 0 <= rep.pck <= 100 and 0 <= rep.auc <= 100
    assert len(rep.per_record) == 30 and rep.per_record[0][0] == "r0"
    rep.write_json(tmp_path / "e.json")
    d = json.loads((tmp_path / "e.json").read_text())
    assert set(d) == {"mpjpe", "pa_mpjpe", "pck", "auc", "threshold_mm", "count"}
    rep.write_csv(tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "id,mpjpe_mm,pa_mpjpe_mm"
    perfect = evaluate(gt, gt)
    assert (perfect.mpjpe, perfect.pck, perfect.auc) == (0.0, 100.0, 100.0)
    assert "MPJPE" in rep.summary()
