import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation
from scipy.stats import chi2

from motionlift.core_types import HypothesisSet, MotionSequence
from motionlift.errors import (
    DegenerateFrame,
    ShapeMismatch,
    SingularCovariance,
    TooFewFrames,
    TooFewHypotheses,
)
from motionlift.metrics import (
    calibration_scores,
    ece,
    evaluate,
    min_mpjpe,
    mpjve,
    pa_mpjpe,
    per_hypothesis_mpjpe,
    procrustes_align,
)

from conftest import random_motion


def hyps_from(arr, gt):
    return HypothesisSet.from_array(np.asarray(arr), gt.root_trajectory, gt.root_index)


def test_identical_hypothesis_is_zero(rng):
    gt = random_motion(rng)
    assert min_mpjpe(hyps_from(gt.positions[None], gt), gt) == (0.0, 0)


def test_constant_offset_10mm(rng):
    gt = random_motion(rng, J=6)
    pred = gt.positions + np.array([0.006, 0.0, 0.008])
    err, _ = min_mpjpe(pred, gt)
    assert err == pytest.approx(10.0)


def test_brute_force_min(rng):
    gt = random_motion(rng, F=3, J=4)
    hs = np.stack([gt.positions + rng.normal(0, s, gt.positions.shape) for s in (0.05, 0.01, 0.03)])
    expected = []
    for h in hs:
        total = 0.0
        for f, j in itertools.product(range(3), range(4)):
            total += np.sqrt(sum((h[f, j, c] - gt.positions[f, j, c]) ** 2 for c in range(3)))
        expected.append(total / 12 * 1000)
    err, best = min_mpjpe(hs, gt)
    assert best == int(np.argmin(expected))
    assert err == pytest.approx(min(expected))


def test_shape_mismatch(rng):
    gt = random_motion(rng)
    with pytest.raises(ShapeMismatch):
        min_mpjpe(np.zeros((2, 3, 3, 3)), gt)


def test_similarity_transformed_gt_aligns_to_zero(rng):
    gt = random_motion(rng, F=5, J=8)
    R = Rotation.random(random_state=1).as_matrix()
    pred = 2.0 * gt.positions @ R.T + np.array([0.3, -0.1, 0.2])
    assert pa_mpjpe(pred[None], gt) == pytest.approx(0.0, abs=1e-7)
    assert pa_mpjpe(pred[None], gt, per_frame=False) == pytest.approx(0.0, abs=1e-7)
    # without scale the 2x remains
    assert pa_mpjpe(pred[None], gt, scale=False) > 1.0


def test_alignment_never_increases_squared_error(rng):
    gt = random_motion(rng, F=4, J=10)
    for _ in range(20):
        pred = gt.positions + rng.normal(0, 0.05, gt.positions.shape)
        al = procrustes_align(pred, gt.positions)
        assert np.all(((al - gt.positions) ** 2).sum(axis=(1, 2))
                      <= ((pred - gt.positions) ** 2).sum(axis=(1, 2)) + 1e-12)


def _grid_search_alignment(pred, target, rng):
    """Best similarity transform by rotation search; scale/translation in closed form."""
    p0 = pred - pred.mean(0)
    t0 = target - target.mean(0)

    def sse(R):
        q = p0 @ R.T
        c = (q * t0).sum() / (q * q).sum()
        return ((c * q - t0) ** 2).sum(), c * q + target.mean(0)

    cands = Rotation.random(20000, random_state=rng.integers(1 << 31))
    best = min(cands, key=lambda r: sse(r.as_matrix())[0])
    width = 0.2
    for _ in range(60):
        trials = [best] + [Rotation.from_rotvec(rng.normal(0, width, 3)) * best for _ in range(40)]
        best = min(trials, key=lambda r: sse(r.as_matrix())[0])
        width *= 0.9
    return sse(best.as_matrix())[1]


def test_procrustes_matches_grid_search(rng):
    gt = random_motion(rng, F=1, J=12)
    pred = 1.3 * gt.positions @ Rotation.random(random_state=7).as_matrix().T
    pred = pred + rng.normal(0, 0.05, pred.shape)
    ours = np.linalg.norm(procrustes_align(pred[0], gt.positions[0]) - gt.positions[0], axis=-1).mean()
    oracle = np.linalg.norm(_grid_search_alignment(pred[0], gt.positions[0], rng)
                            - gt.positions[0], axis=-1).mean()
    assert ours == pytest.approx(oracle, rel=0.02)


def test_degenerate_frame(rng):
    gt = random_motion(rng)
    with pytest.raises(DegenerateFrame):
        pa_mpjpe(np.zeros((1,) + gt.positions.shape), gt)


def test_pa_below_min_on_realistic_sets(rng):
    for _ in range(20):
        gt = random_motion(rng, F=4, J=17)
        hs = gt.positions + rng.normal(0, 0.04, (30,) + gt.positions.shape)
        assert pa_mpjpe(hs, gt) <= min_mpjpe(hs, gt)[0] + 1e-9


def test_velocity_offset_is_zero(rng):
    gt = random_motion(rng)
    assert mpjve(gt.positions[None].astype(np.float64) + 0.1, gt, 0) == pytest.approx(0.0, abs=1e-9)


def test_velocity_three_frame_hand_case():
    gt = np.zeros((3, 2, 3))
    pred = gt.copy()
    pred[1, 1] = (0.003, 0.004, 0.0)  # 5 mm at one joint of the middle frame
    # two affected velocity terms of 5 mm each, averaged over 2 x 2 terms
    assert mpjve(pred[None], gt, 0) == pytest.approx(2.5)


def test_velocity_grows_with_noise(rng):
    gt = np.zeros((20, 5, 3))
    means = [np.mean([mpjve(rng.normal(0, s, (1, 20, 5, 3)), gt, 0) for _ in range(30)])
             for s in (0.001, 0.01, 0.05)]
    assert means[0] < means[1] < means[2]


def test_velocity_needs_two_frames(rng):
    with pytest.raises(TooFewFrames):
        mpjve(np.zeros((1, 1, 3, 3)), np.zeros((1, 3, 3)), 0)


def test_ece_well_specified_gaussian():
    rng = np.random.default_rng(3)
    # 10^4 independent (frame, joint) trials with random per-site covariance
    F, J, N = 100, 100, 200
    A = rng.normal(0, 0.02, (F, J, 3, 3))
    mu = rng.normal(0, 0.3, (F, J, 3))
    gt = mu + np.einsum("fjik,fjk->fji", A, rng.standard_normal((F, J, 3)))
    hs = mu + np.einsum("fjik,nfjk->nfji", A, rng.standard_normal((N, F, J, 3)))
    e, table = ece(hs, gt)
    assert e < 0.02
    assert len(table) == 19


def test_ece_overconfident():
    rng = np.random.default_rng(4)
    gt = rng.normal(0, 0.05, (50, 20, 3))
    hs = rng.normal(0, 0.005, (200, 50, 20, 3))
    e, table = ece(hs, gt)
    assert e > 0.3
    assert table[0][1] < 0.01


def test_single_quantile_median():
    rng = np.random.default_rng(5)
    hs = rng.standard_normal((2000, 40, 10, 3))
    gt = rng.standard_normal((40, 10, 3))
    e, _ = ece(hs, gt, quantiles=[0.5])
    assert e < 0.05


def test_scores_match_closed_form(rng):
    hs = rng.normal(0, 1.0, (50, 1, 1, 3))
    gt = np.array([[[0.5, -0.2, 1.0]]])
    mu = hs.mean(0)[0, 0]
    cov = np.cov(hs[:, 0, 0].T) + 1e-9 * np.eye(3)
    d = gt[0, 0] - mu
    expected = chi2.cdf(d @ np.linalg.solve(cov, d), 3)
    assert calibration_scores(hs, gt)[0, 0] == pytest.approx(expected)


def test_ece_errors(rng):
    with pytest.raises(TooFewHypotheses):
        ece(np.zeros((7, 2, 2, 3)), np.zeros((2, 2, 3)))
    # duplicates leave only the 1e-9 shrinkage; covariance stays PD, so no error
    ece(np.zeros((8, 2, 2, 3)), np.zeros((2, 2, 3)))
    with pytest.raises(SingularCovariance):
        ece(np.full((8, 1, 1, 3), np.nan), np.zeros((1, 1, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(8, 20))
def test_order_invariance(seed, N):
    r = np.random.default_rng(seed)
    gt = random_motion(r, F=3, J=5)
    hs = gt.positions + r.normal(0, 0.05, (N,) + gt.positions.shape)
    perm = r.permutation(N)
    a, b = hyps_from(hs, gt), hyps_from(hs[perm], gt)
    ra, rb = evaluate(a, gt), evaluate(b, gt)
    assert ra.min_mpjpe == pytest.approx(rb.min_mpjpe)
    assert ra.pa_mpjpe == pytest.approx(rb.pa_mpjpe)
    assert ra.mpjve == pytest.approx(rb.mpjve)
    assert ra.ece == pytest.approx(rb.ece)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_min_non_increasing_when_appending(seed):
    r = np.random.default_rng(seed)
    gt = random_motion(r, F=3, J=4)
    hs = gt.positions + r.normal(0, 0.1, (15,) + gt.positions.shape)
    errs = [min_mpjpe(hs[:n], gt)[0] for n in range(1, 16)]
    assert np.all(np.diff(errs) <= 0)


def test_report_json_and_ranges(rng):
    import json
    gt = random_motion(rng, F=4, J=6)
    hs = hyps_from(gt.positions + rng.normal(0, 0.03, (16,) + gt.positions.shape), gt)
    rep = evaluate(hs, gt)
    d = json.loads(rep.to_json())
    assert set(d) >= {"min_mpjpe", "pa_mpjpe", "mpjve", "ece", "quantiles", "best_index",
                      "n_hypotheses"}
    assert 0 <= rep.ece <= 1 and rep.min_mpjpe >= 0 and rep.mpjve >= 0
    assert rep.pa_mpjpe <= rep.min_mpjpe + 1e-9
    assert per_hypothesis_mpjpe(hs, gt).shape == (16,)
    # fewer than 8 hypotheses: no ECE
    assert evaluate(hyps_from(hs.positions[:3], gt), gt).ece is None
