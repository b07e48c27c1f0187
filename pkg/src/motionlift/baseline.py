"""Regressor-mean baseline with an isotropic Gaussian posterior.

A small MLP maps one camera's 2D keypoints to root-relative 3D poses. Its
maximum-likelihood noise level is the RMS training residual. Samples add
independent noise per frame, joint and coordinate, so they carry no temporal
correlation.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .core_types import HypothesisSet, MotionSequence, Observation2D
from .errors import EmptyDataset, InvalidValue, ShapeMismatch, VersionMismatch
from .trainer import read_container, write_container


@dataclass
class BaselineConfig:
    frames: int = 16
    joints: int = 17
    hidden: int = 256
    steps: int = 3000
    batch_size: int = 64
    learning_rate: float = 1e-3
    pixel_scale: float = 500.0  # pixels mapped to unit input range
    seed: int = 0
    root_index: int = 0


class Regressor(nn.Module):
    def __init__(self, cfg: BaselineConfig):
        super().__init__()
        n_in, n_out = cfg.frames * cfg.joints * 2, cfg.frames * cfg.joints * 3
        self.net = nn.Sequential(
            nn.Linear(n_in, cfg.hidden), nn.ReLU(),
            nn.Linear(cfg.hidden, cfg.hidden), nn.ReLU(),
            nn.Linear(cfg.hidden, n_out),
        )

    def forward(self, x):
        return self.net(x)


@dataclass
class BaselineModel:
    cfg: BaselineConfig
    regressor: Regressor
    sigma: float

    def __post_init__(self):
        if not self.sigma >= 0:
            raise InvalidValue("sigma must be non-negative")

    def features(self, obs: Observation2D) -> np.ndarray:
        """Keypoints relative to the root keypoint, scaled to roughly unit range."""
        kp = np.asarray(obs.keypoints, np.float64)
        if kp.shape[:2] != (self.cfg.frames, self.cfg.joints):
            raise ShapeMismatch(f"baseline expects {self.cfg.frames} x {self.cfg.joints} keypoints")
        rel = kp - kp[:, self.cfg.root_index:self.cfg.root_index + 1]
        return (rel / self.cfg.pixel_scale).reshape(-1)

    def mean(self, obs: Observation2D) -> np.ndarray:
        """Predicted relative pose mu(y), F x J x 3 with the root pinned."""
        with torch.no_grad():
            out = self.regressor(torch.from_numpy(self.features(obs)).float()).double().numpy()
        out = out.reshape(self.cfg.frames, self.cfg.joints, 3)
        out[:, self.cfg.root_index] = 0.0
        return out


def ml_sigma(residuals: np.ndarray) -> float:
    """Maximum-likelihood isotropic std: RMS of the residual coordinates."""
    return float(np.sqrt(np.mean(np.square(residuals))))


def fit_baseline(pairs: Sequence[tuple[Observation2D, MotionSequence]],
                 cfg: BaselineConfig) -> BaselineModel:
    """Train the regressor by MSE, then set sigma to the ML value on the training pairs.

    Root coordinates are excluded from the residuals since they are pinned.
    """
    if not pairs:
        raise EmptyDataset("baseline needs training pairs")
    torch.manual_seed(cfg.seed)
    model = BaselineModel(cfg, Regressor(cfg), 1.0)
    X = torch.from_numpy(np.stack([model.features(o) for o, _ in pairs])).float()
    Y = torch.from_numpy(np.stack([s.positions.reshape(-1) for _, s in pairs])).float()
    keep = torch.ones(cfg.frames, cfg.joints, 3, dtype=torch.bool)
    keep[:, cfg.root_index] = False
    keep = keep.reshape(-1)

    opt = torch.optim.Adam(model.regressor.parameters(), lr=cfg.learning_rate)
    gen = np.random.default_rng(cfg.seed)
    for _ in range(cfg.steps):
        idx = torch.from_numpy(gen.integers(len(pairs), size=min(cfg.batch_size, len(pairs))))
        opt.zero_grad()
        loss = ((model.regressor(X[idx]) - Y[idx])[:, keep] ** 2).mean()
        loss.backward()
        opt.step()

    with torch.no_grad():
        resid = (model.regressor(X) - Y)[:, keep].double().numpy()
    model.sigma = ml_sigma(resid)
    return model


def sample_baseline(model: BaselineModel, obs: Observation2D, root_trajectory, N: int,
                    rng: np.random.Generator, sigma: float | None = None,
                    observation_ref: str = "") -> HypothesisSet:
    """N draws of mu(y) + sigma * eps with iid eps; ``sigma`` overrides the fitted value."""
    s = model.sigma if sigma is None else sigma
    mu = model.mean(obs)
    draws = mu + s * rng.standard_normal((N,) + mu.shape)
    return HypothesisSet.from_array(draws, root_trajectory, model.cfg.root_index, observation_ref)


def save_baseline(model: BaselineModel, path) -> None:
    tensors = {f"regressor.{k}": v.numpy() for k, v in model.regressor.state_dict().items()}
    write_container(path, {"section": "baseline", "config": asdict(model.cfg),
                           "sigma": model.sigma}, tensors)


def load_baseline(path) -> BaselineModel:
    header, tensors = read_container(path)
    if header.get("section") != "baseline":
        raise VersionMismatch(f"{path}: expected a baseline model, got {header.get('section')}")
    cfg = BaselineConfig(**header["config"])
    reg = Regressor(cfg)
    reg.load_state_dict({k[len("regressor."):]: torch.from_numpy(v) for k, v in tensors.items()})
    return BaselineModel(cfg, reg, float(header["sigma"]))
