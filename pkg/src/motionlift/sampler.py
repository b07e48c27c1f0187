"""Energy-guided sampling of motion hypotheses from the trained prior.

For each hypothesis: draw noise, diffuse it to the first grid step, then at
every grid step denoise, run the guided update, and re-diffuse to the next
step. The last guided estimate is returned without re-noising.
"""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .core_types import CameraParams, HypothesisSet, MotionSequence, Observation2D
from .energy import EnergyConfig, estimate_confidences, guided_update
from .errors import GridMismatch, InvalidValue, SequenceTooLong
from .schedule import make_grid, to_trained_timestep
from .trainer import Checkpoint


@dataclass
class SamplerConfig:
    T: int = 10
    S: int = 2
    n: int = 1
    N: int = 200
    lam: float = 4.5e-6
    k: int = 3
    decay_factor: float = 0.1
    seed: int = 0
    batch_size: int = 256
    # divide lam by the camera count so the step stays stable as views are added
    normalize_by_cameras: bool = True
    # "ode": re-diffuse along the noise implied by x_t and the unguided estimate
    # (deterministic probability-flow step); "fresh": draw new Gaussian noise
    renoise: str = "ode"

    def __post_init__(self):
        if self.N < 1:
            raise InvalidValue("need at least one hypothesis")
        if self.batch_size < 1:
            raise InvalidValue("batch_size must be >= 1")
        if self.renoise not in ("ode", "fresh"):
            raise InvalidValue(f"renoise must be 'ode' or 'fresh', got {self.renoise!r}")
        self.grid = make_grid(self.T, self.S, self.n)

    def energy_config(self, observations, root_index: int = 0) -> EnergyConfig:
        lam = self.lam / len(observations) if self.normalize_by_cameras else self.lam
        return EnergyConfig(lam, self.k, self.decay_factor, observations, root_index)


def hypothesis_rngs(seed: int, N: int) -> list[np.random.Generator]:
    """Independent per-hypothesis streams; the first m streams do not depend on N."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(N)]


def _trained_steps(cfg: SamplerConfig, trained_T: int) -> list[int]:
    steps = [to_trained_timestep(s, cfg.T, trained_T) for s in cfg.grid.steps]
    start = to_trained_timestep(cfg.grid.T_start, cfg.T, trained_T)
    if start > trained_T or min(steps) < 1:
        raise GridMismatch(f"grid T={cfg.T} cannot be mapped onto a {trained_T}-step schedule")
    return steps


def _draw(rngs, shape) -> np.ndarray:
    return np.stack([r.standard_normal(shape) for r in rngs])


def _unit_mean(c: np.ndarray) -> np.ndarray:
    m = c.mean(axis=(-2, -1), keepdims=True)
    return np.where(m > 0, c / np.where(m > 0, m, 1.0), 1.0)


def sample(ckpt: Checkpoint, observations: Sequence[tuple[Observation2D, CameraParams]],
           root_trajectory: np.ndarray, cfg: SamplerConfig, root_index: int = 0,
           observation_ref: str = "", return_lambda: bool = False,
           oracle_keypoints: Sequence[Observation2D] | None = None):
    """Draw ``cfg.N`` hypotheses conditioned on 2D observations.

    Observations may come from several cameras. With ``cfg.lam == 0`` (or all
    confidences zero) this samples the unconditioned prior.

    ``oracle_keypoints`` (one per camera, noise-free 2D keypoints) switches to
    oracle confidences: before every guided update each keypoint's confidence
    is the L1 pixel distance between its oracle position and the current
    estimate's reprojection, rescaled to unit mean per hypothesis and camera
    so that ``cfg.lam`` keeps its meaning. Stored confidences are ignored in
    that mode.
    """
    model = ckpt.eval_model()
    sched = ckpt.schedule
    root_trajectory = np.asarray(root_trajectory, np.float64)
    n_frames, J = observations[0][0].keypoints.shape[:2]
    if any(o.keypoints.shape[:2] != (n_frames, J) for o, _ in observations):
        raise InvalidValue("observations disagree on F or J")
    if n_frames > ckpt.config.F_max:
        raise SequenceTooLong(f"{n_frames} frames, checkpoint was trained on <= {ckpt.config.F_max}")
    ecfg = cfg.energy_config(observations, root_index)
    if oracle_keypoints is not None and len(oracle_keypoints) != len(observations):
        raise InvalidValue("need one oracle keypoint set per observation")
    steps = _trained_steps(cfg, sched.T)
    t_start = to_trained_timestep(cfg.grid.T_start, cfg.T, sched.T)
    shape = (n_frames, J, 3)

    rngs = hypothesis_rngs(cfg.seed, cfg.N)
    out = np.empty((cfg.N,) + shape)
    lam_out = np.empty(cfg.N)
    for lo in range(0, cfg.N, cfg.batch_size):
        chunk = rngs[lo:lo + cfg.batch_size]
        ab = sched.alpha_bar[t_start]
        x = _draw(chunk, shape)
        x = math.sqrt(ab) * x + math.sqrt(1 - ab) * _draw(chunk, shape)
        lam = np.full(len(chunk), float(ecfg.lam))
        for i, t in enumerate(steps):
            with torch.no_grad():
                z0 = model(torch.from_numpy(x.astype(np.float32)), t).double().numpy()
            x0 = ckpt.denormalize(z0)
            x0[..., root_index, :] = 0.0
            conf = None
            if oracle_keypoints is not None:
                conf = [_unit_mean(estimate_confidences(y, x0, root_trajectory, cam))
                        for y, (_, cam) in zip(oracle_keypoints, observations)]
            x0, lam = guided_update(x0, root_trajectory, ecfg, lam, conf)
            if i + 1 < len(steps):
                if cfg.renoise == "ode":
                    ab_t = sched.alpha_bar[t]
                    noise = (x - math.sqrt(ab_t) * z0) / math.sqrt(1 - ab_t)
                else:
                    noise = _draw(chunk, shape)
                ab = sched.alpha_bar[steps[i + 1]]
                x = math.sqrt(ab) * ckpt.normalize(x0) + math.sqrt(1 - ab) * noise
        out[lo:lo + len(chunk)] = x0
        lam_out[lo:lo + len(chunk)] = lam
    hyps = HypothesisSet.from_array(out, root_trajectory, root_index, observation_ref)
    return (hyps, lam_out) if return_lambda else hyps


def grid_for_steps(steps: int, start_fraction: float = 0.2) -> tuple[int, int]:
    """Smallest (T, S) with ``S = ceil(start_fraction * T)`` and ``T - S == steps``."""
    T = steps
    while T - math.ceil(start_fraction * T - 1e-12) < steps:
        T += 1
    return T, math.ceil(start_fraction * T - 1e-12)


def sample_timing(ckpt: Checkpoint, observations, gt: MotionSequence, cfg: SamplerConfig,
                  steps_list: Sequence[int]) -> list[dict]:
    """Wall time and minMPJPE of sampling at each number of denoising steps."""
    from .metrics import min_mpjpe

    rows = []
    for n_steps in steps_list:
        T, S = grid_for_steps(n_steps)
        run_cfg = dataclasses.replace(cfg, T=T, S=S, n=1)
        t0 = time.perf_counter()
        hyps = sample(ckpt, observations, gt.root_trajectory, run_cfg, gt.root_index)
        wall = time.perf_counter() - t0
        err, _ = min_mpjpe(hyps, gt)
        rows.append({"steps": n_steps, "T": T, "S": S, "wall_time": wall, "min_mpjpe": err})
    return rows
