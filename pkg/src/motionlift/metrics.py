"""Multi-hypothesis evaluation metrics.

Errors are reported in millimetres on root-relative poses. ECE fits a
Gaussian to the hypotheses at every (frame, joint) and checks how often the
ground truth falls inside each chi-square quantile region.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import chi2

from .core_types import HypothesisSet, MotionSequence
from .errors import (
    DegenerateFrame,
    ShapeMismatch,
    SingularCovariance,
    TooFewFrames,
    TooFewHypotheses,
)

DEFAULT_QUANTILES = np.round(np.arange(1, 20) * 0.05, 2)
COV_SHRINKAGE = 1e-9  # m^2
MIN_ECE_HYPOTHESES = 8


def _stack(h: HypothesisSet | np.ndarray, gt: MotionSequence | np.ndarray):
    pred = h.positions if isinstance(h, HypothesisSet) else np.asarray(h, np.float64)
    ref = gt.positions if isinstance(gt, MotionSequence) else gt
    ref = np.asarray(ref, np.float64)
    if pred.ndim == 3:
        pred = pred[None]
    if pred.shape[1:] != ref.shape:
        raise ShapeMismatch(f"hypotheses {pred.shape[1:]} vs ground truth {ref.shape}")
    return pred, ref


def per_hypothesis_mpjpe(h, gt) -> np.ndarray:
    pred, ref = _stack(h, gt)
    return np.linalg.norm(pred - ref, axis=-1).mean(axis=(1, 2)) * 1000.0


def min_mpjpe(h, gt) -> tuple[float, int]:
    """Best whole-sequence error over hypotheses, and the index achieving it."""
    errs = per_hypothesis_mpjpe(h, gt)
    best = int(np.argmin(errs))
    return float(errs[best]), best


def procrustes_align(pred: np.ndarray, target: np.ndarray, scale: bool = True) -> np.ndarray:
    """Similarity-align ``pred`` onto ``target`` (both ``... x P x 3``) via SVD."""
    mu_p = pred.mean(axis=-2, keepdims=True)
    mu_t = target.mean(axis=-2, keepdims=True)
    p0, t0 = pred - mu_p, target - mu_t
    var_p = (p0 ** 2).sum(axis=(-2, -1))
    if np.any(var_p <= 1e-18):
        raise DegenerateFrame("prediction collapses to a single point")
    cov = np.swapaxes(t0, -1, -2) @ p0
    U, s, Vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.ones(U.shape[:-2] + (3,))
    D[..., 2] = d
    R = (U * D[..., None, :]) @ Vt
    c = (s * D).sum(axis=-1) / var_p if scale else np.ones_like(var_p)
    return c[..., None, None] * (p0 @ np.swapaxes(R, -1, -2)) + mu_t


def pa_mpjpe(h, gt, scale: bool = True, per_frame: bool = True) -> float:
    """min over hypotheses of the mean error after Procrustes alignment.

    Alignment is solved per frame by default, or once per sequence.
    """
    pred, ref = _stack(h, gt)
    N, n_frames, J, _ = pred.shape
    if per_frame:
        aligned = procrustes_align(pred, np.broadcast_to(ref, pred.shape), scale)
    else:
        flat = procrustes_align(pred.reshape(N, n_frames * J, 3),
                                np.broadcast_to(ref.reshape(-1, 3), (N, n_frames * J, 3)), scale)
        aligned = flat.reshape(pred.shape)
    errs = np.linalg.norm(aligned - ref, axis=-1).mean(axis=(1, 2)) * 1000.0
    return float(errs.min())


def mpjve(h, gt, best_index: int) -> float:
    """Velocity error of hypothesis ``best_index``, mm per frame."""
    pred, ref = _stack(h, gt)
    if ref.shape[0] < 2:
        raise TooFewFrames("velocity error needs at least 2 frames")
    v_pred = np.diff(pred[best_index], axis=0)
    v_ref = np.diff(ref, axis=0)
    return float(np.linalg.norm(v_pred - v_ref, axis=-1).mean() * 1000.0)


def calibration_scores(h, gt, joints=None) -> np.ndarray:
    """Chi-square(3) CDF of the ground truth's Mahalanobis distance, per (frame, joint).

    ``joints`` selects which joints are scored (default: all).
    """
    pred, ref = _stack(h, gt)
    if pred.shape[0] < MIN_ECE_HYPOTHESES:
        raise TooFewHypotheses(f"ECE needs >= {MIN_ECE_HYPOTHESES} hypotheses, got {pred.shape[0]}")
    if joints is not None:
        pred, ref = pred[:, :, joints], ref[:, joints]
    mu = pred.mean(axis=0)
    dev = pred - mu
    cov = np.einsum("nfji,nfjk->fjik", dev, dev) / (pred.shape[0] - 1)
    cov = cov + COV_SHRINKAGE * np.eye(3)
    if not np.all(np.isfinite(cov)):
        raise SingularCovariance("hypothesis covariance is not finite")
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("hypothesis covariance is singular") from exc
    z = np.linalg.solve(L, (ref - mu)[..., None])[..., 0]
    return chi2.cdf((z ** 2).sum(axis=-1), df=3)


def coverage(scores: np.ndarray, quantiles=DEFAULT_QUANTILES) -> np.ndarray:
    scores = np.ravel(scores)
    return np.array([(scores <= q).mean() for q in quantiles])


def ece(h, gt, quantiles=DEFAULT_QUANTILES, joints=None) -> tuple[float, list[tuple[float, float]]]:
    """Mean |q - omega(q)| over the quantile grid, plus the (q, omega) table."""
    quantiles = np.asarray(quantiles, float)
    omega = coverage(calibration_scores(h, gt, joints), quantiles)
    return float(np.abs(quantiles - omega).mean()), list(zip(quantiles.tolist(), omega.tolist()))


def ece_from_scores(scores, quantiles=DEFAULT_QUANTILES) -> float:
    """ECE pooled over scores gathered from many instances."""
    quantiles = np.asarray(quantiles, float)
    return float(np.abs(quantiles - coverage(scores, quantiles)).mean())


@dataclass
class MetricsReport:
    min_mpjpe: float
    pa_mpjpe: float
    mpjve: float | None
    ece: float | None
    quantiles: list[dict] = field(default_factory=list)
    best_index: int = 0
    n_hypotheses: int = 0
    procrustes_scale: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def evaluate(h: HypothesisSet, gt: MotionSequence, quantiles=DEFAULT_QUANTILES,
             procrustes_scale: bool = True) -> MetricsReport:
    """All four metrics; ECE is None below 8 hypotheses and MPJVE below 2 frames.

    The root joint is excluded from ECE since it is pinned in every hypothesis.
    """
    err, best = min_mpjpe(h, gt)
    pa = pa_mpjpe(h, gt, scale=procrustes_scale)
    vel = mpjve(h, gt, best) if gt.frames >= 2 else None
    e, table = None, []
    if len(h) >= MIN_ECE_HYPOTHESES:
        joints = [j for j in range(gt.joints) if j != gt.root_index]
        e, tab = ece(h, gt, quantiles, joints)
        table = [{"q": q, "omega": w} for q, w in tab]
    return MetricsReport(err, pa, vel, e, table, best, len(h), procrustes_scale)
