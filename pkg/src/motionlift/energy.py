"""Reprojection energy, its gradient, and the decaying guided update.

Poses are arrays of relative positions with optional leading batch axes
(``... x F x J x 3``); the shared root trajectory is F x 3. The energy scale
acts as the step size of the update, not as a factor inside the energy.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .camera import project_array, project_jacobian_array
from .core_types import CameraParams, Observation2D
from .errors import AllPointsBehindCamera, InvalidValue, NonFiniteUpdate


@dataclass
class EnergyConfig:
    lam: float = 3e-6
    k: int = 3
    decay_factor: float = 0.1
    observations: Sequence[tuple[Observation2D, CameraParams]] = field(default_factory=list)
    root_index: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidValue("energy scale must be non-negative")
        if self.k < 1:
            raise InvalidValue("k must be >= 1")
        if not 0.0 < self.decay_factor < 1.0:
            raise InvalidValue("decay_factor must lie in (0, 1)")
        if not self.observations:
            raise InvalidValue("at least one observation is required")
        self.observations = list(self.observations)


def _residuals(x, root, obs: Observation2D, cam: CameraParams):
    proj = project_array(x, root, cam)
    r = np.where(proj.valid_mask[..., None], obs.keypoints - proj.pixels, 0.0)
    return r, proj.valid_mask


def energy(x: np.ndarray, root: np.ndarray, cfg: EnergyConfig) -> np.ndarray:
    """Summed squared reprojection error over cameras, frames and joints.

    Returns one value per leading batch element (a scalar for a single pose).
    """
    total, any_valid = 0.0, False
    for obs, cam in cfg.observations:
        r, valid = _residuals(x, root, obs, cam)
        any_valid = any_valid or bool(valid.any())
        total = total + (r ** 2).sum(axis=(-3, -2, -1))
    if not any_valid:
        raise AllPointsBehindCamera("no joint is visible in any camera")
    return total


def energy_gradient(x: np.ndarray, root: np.ndarray, cfg: EnergyConfig,
                    use_confidence: bool = True, confidences=None) -> np.ndarray:
    """d(energy)/d(x), with each keypoint's term scaled by its confidence.

    ``confidences`` optionally replaces the stored ones: one array per camera,
    broadcastable to ``... x F x J`` (so it may vary across the batch). The
    root joint rows are zero since the root is pinned at the origin.
    """
    x = np.asarray(x, np.float64)
    grad = np.zeros_like(x)
    any_valid = False
    for i, (obs, cam) in enumerate(cfg.observations):
        r, valid = _residuals(x, root, obs, cam)
        any_valid = any_valid or bool(valid.any())
        jac = project_jacobian_array(x, root, cam, zero_invalid=True)
        g = -2.0 * np.einsum("...i,...ij->...j", r, jac)
        if use_confidence:
            c = obs.confidence if confidences is None else confidences[i]
            g = g * np.asarray(c)[..., None]
        grad += g
    if not any_valid:
        raise AllPointsBehindCamera("no joint is visible in any camera")
    grad[..., cfg.root_index, :] = 0.0
    return grad


def guided_update(x: np.ndarray, root: np.ndarray, cfg: EnergyConfig, lam_state=None,
                  confidences=None):
    """Run ``cfg.k`` descent steps ``x <- x - lam * c * grad E``.

    After a step that raised the energy, ``lam`` is multiplied by
    ``cfg.decay_factor``. ``lam_state`` holds one scale per leading batch
    element (defaults to ``cfg.lam``); the updated pose and state are returned.
    ``confidences`` is passed through to :func:`energy_gradient`.
    """
    x = np.array(x, dtype=np.float64)
    batch_shape = x.shape[:-3]
    lam = np.broadcast_to(cfg.lam if lam_state is None else lam_state, batch_shape).astype(float)
    e_prev = energy(x, root, cfg)
    for _ in range(cfg.k):
        x = x - lam[..., None, None, None] * energy_gradient(x, root, cfg,
                                                             confidences=confidences)
        if not np.isfinite(x).all():
            raise NonFiniteUpdate("guided update produced non-finite coordinates")
        e = energy(x, root, cfg)
        lam = np.where(e > e_prev, lam * cfg.decay_factor, lam)
        e_prev = e
    return x, (lam if batch_shape else float(lam))


def estimate_confidences(y_star: Observation2D, x: np.ndarray, root: np.ndarray,
                         cam: CameraParams) -> np.ndarray:
    """Per-keypoint L1 pixel deviation between reference keypoints and the reprojection."""
    proj = project_array(x, root, cam)
    dev = np.abs(y_star.keypoints - proj.pixels).sum(axis=-1)
    return np.where(proj.valid_mask, dev, 0.0)
