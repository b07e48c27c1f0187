"""Discrete noise schedules, the forward diffusion marginal and sampling grids."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidGrid, InvalidT, TimestepOutOfRange

LINEAR_RANGE = (1e-4, 0.2)
COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    kind: str
    sigma: np.ndarray  # length T + 1, per-step noise level
    alpha_bar: np.ndarray  # length T + 1, cumulative product of (1 - sigma)

    def __post_init__(self):
        for name in ("sigma", "alpha_bar"):
            a = np.array(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def check_timestep(self, t: int) -> None:
        if not 0 <= t <= self.T:
            raise TimestepOutOfRange(f"timestep {t} outside [0, {self.T}]")


def make_schedule(T: int, kind: str = "linear") -> NoiseSchedule:
    if T < 2:
        raise InvalidT(f"T must be >= 2, got {T}")
    if kind == "linear":
        sigma = np.linspace(*LINEAR_RANGE, T + 1)
    elif kind == "cosine":
        k = np.arange(T + 2) / (T + 1)
        f = np.cos((k + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
        sigma = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(T, kind, sigma, np.cumprod(1.0 - sigma))


def schedule_from_sigma(sigma, kind: str) -> NoiseSchedule:
    sigma = np.asarray(sigma, np.float64)
    return NoiseSchedule(len(sigma) - 1, kind, sigma, np.cumprod(1.0 - sigma))


def forward_diffuse(x0: np.ndarray, t: int, sched: NoiseSchedule,
                    rng: np.random.Generator) -> np.ndarray:
    """Draw from q(x_t | x_0) = N(sqrt(ab_t) x_0, (1 - ab_t) I)."""
    sched.check_timestep(t)
    ab = sched.alpha_bar[t]
    eps = rng.standard_normal(np.shape(x0))
    return math.sqrt(ab) * np.asarray(x0, np.float64) + math.sqrt(1.0 - ab) * eps


@dataclass(frozen=True)
class SamplingGrid:
    T: int
    S: int
    n: int
    steps: tuple[int, ...]

    @property
    def T_start(self) -> int:
        return self.T - self.S


def make_grid(T: int, S: int, n: int) -> SamplingGrid:
    """Descending steps ``[T - S, T - S - n, ..., n]``."""
    if not (0 <= S < T) or n < 1 or (T - S) % n:
        raise InvalidGrid(f"invalid grid T={T} S={S} n={n}")
    return SamplingGrid(T, S, n, tuple(range(T - S, 0, -n)))


def to_trained_timestep(step: int, grid_T: int, trained_T: int) -> int:
    """Map a step of a ``grid_T`` grid onto the trained schedule by rounding."""
    return int(math.floor(step * trained_T / grid_T + 0.5))
