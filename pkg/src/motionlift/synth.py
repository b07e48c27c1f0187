"""Procedural articulated motion and paired 2D observations.

Each non-root joint rotates about its parent by Euler angles that are sums
of 2-4 sinusoids; positions follow by forward kinematics, so bone lengths
never change. The root follows a smoothed random walk.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.spatial.transform import Rotation

from .camera import project_array
from .core_types import (
    CameraParams,
    MotionSequence,
    Observation2D,
    Skeleton,
    h36m_skeleton,
    validate_skeleton,
)
from .errors import AllPointsBehindCamera, InvalidValue

# rest offsets from parent (meters, z up, subject facing -y), H36M ordering
H36M_REST_OFFSETS = np.array([
    [0.0, 0.0, 0.0],
    [-0.13, 0.0, 0.0], [0.0, 0.0, -0.45], [0.0, 0.0, -0.44],
    [0.13, 0.0, 0.0], [0.0, 0.0, -0.45], [0.0, 0.0, -0.44],
    [0.0, 0.0, 0.23], [0.0, 0.0, 0.25], [0.0, -0.05, 0.10], [0.0, 0.0, 0.12],
    [0.15, 0.0, -0.02], [0.0, 0.0, -0.28], [0.0, 0.0, -0.25],
    [-0.15, 0.0, -0.02], [0.0, 0.0, -0.28], [0.0, 0.0, -0.25],
])
PELVIS_HEIGHT = 0.92


@dataclass
class GeneratorConfig:
    skeleton: Skeleton = field(default_factory=h36m_skeleton)
    offsets: np.ndarray = field(default_factory=lambda: H36M_REST_OFFSETS.copy())
    n_sequences: int = 64
    frames: int = 32
    freq_band: tuple[float, float] = (0.1, 0.6)  # Hz
    amplitude_band: tuple[float, float] = (0.02, 0.06)  # meters of displacement per sinusoid
    n_sinusoids: tuple[int, int] = (2, 4)
    root_step_std: float = 0.004  # meters per frame
    root_smoothing: float = 4.0  # frames (Gaussian low-pass width)
    frame_rate: float = 50.0
    noise_std_2d: float = 1.0  # pixels
    seed: int = 0

    def __post_init__(self):
        validate_skeleton(self.skeleton)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if self.offsets.shape != (self.skeleton.num_joints, 3):
            raise InvalidValue("offsets must be J x 3")
        lo, hi = self.freq_band
        alo, ahi = self.amplitude_band
        if not (0 < lo <= hi and 0 < alo <= ahi):
            raise InvalidValue("frequency and amplitude bands must be positive and ordered")
        if self.frames < 1 or self.n_sequences < 0 or self.frame_rate <= 0:
            raise InvalidValue("frames >= 1, n_sequences >= 0, frame_rate > 0 required")
        if not 1 <= self.n_sinusoids[0] <= self.n_sinusoids[1]:
            raise InvalidValue("n_sinusoids must be an ordered positive range")


def forward_kinematics(skeleton: Skeleton, offsets: np.ndarray, local_rot: np.ndarray,
                       root_rot: np.ndarray) -> np.ndarray:
    """Root-relative joint positions.

    Args:
        local_rot: F x J x 3 x 3 rotation of each joint's bone in its parent frame.
        root_rot: F x 3 x 3 global orientation of the root.
    """
    n_frames, J = local_rot.shape[:2]
    glob = np.empty((n_frames, J, 3, 3))
    pos = np.zeros((n_frames, J, 3))
    for j in skeleton.topological_order():
        p = skeleton.parent[j]
        if p < 0:
            glob[:, j] = root_rot
            continue
        glob[:, j] = glob[:, p] @ local_rot[:, j]
        pos[:, j] = pos[:, p] + glob[:, j] @ offsets[j]
    return pos


def _sequence(cfg: GeneratorConfig, rng: np.random.Generator) -> MotionSequence:
    sk = cfg.skeleton
    J, n_frames = sk.num_joints, cfg.frames
    time = np.arange(n_frames) / cfg.frame_rate
    bone = np.linalg.norm(cfg.offsets, axis=1)

    angles = np.zeros((n_frames, J, 3))
    for j in range(J):
        if sk.parent[j] < 0:
            continue
        for axis in range(3):
            n = rng.integers(cfg.n_sinusoids[0], cfg.n_sinusoids[1] + 1)
            freq = rng.uniform(*cfg.freq_band, size=n)
            amp = rng.uniform(*cfg.amplitude_band, size=n) / bone[j]
            phase = rng.uniform(0, 2 * np.pi, size=n)
            angles[:, j, axis] = np.sin(2 * np.pi * freq * time[:, None] + phase) @ amp
    local = Rotation.from_euler("xyz", angles.reshape(-1, 3)).as_matrix().reshape(n_frames, J, 3, 3)
    heading = Rotation.from_euler("z", rng.uniform(0, 2 * np.pi)).as_matrix()
    pos = forward_kinematics(sk, cfg.offsets, local, np.broadcast_to(heading, (n_frames, 3, 3)))

    steps = rng.normal(0.0, cfg.root_step_std, size=(n_frames, 3)) * np.array([1.0, 1.0, 0.2])
    walk = np.cumsum(steps, axis=0)
    if n_frames > 1 and cfg.root_smoothing > 0:
        walk = gaussian_filter1d(walk, cfg.root_smoothing, axis=0, mode="nearest")
    start = np.r_[rng.uniform(-0.3, 0.3, size=2), PELVIS_HEIGHT]
    return MotionSequence.from_relative(pos, start + walk, sk.root_index)


def generate_motions(cfg: GeneratorConfig) -> list[MotionSequence]:
    """``cfg.n_sequences`` motions; sequence i depends only on (seed, i)."""
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_sequences)
    return [_sequence(cfg, np.random.default_rng(s)) for s in children]


def default_camera_rig(n: int = 4, radius: float = 3.0, height: float = 1.5,
                       focal: float = 1000.0, image_size: float = 1000.0) -> list[CameraParams]:
    """``n`` cameras evenly spaced on a circle, all aimed at the origin."""
    cams = []
    for i in range(n):
        a = np.pi / 4 + 2 * np.pi * i / n
        eye = (radius * np.cos(a), radius * np.sin(a), height)
        cams.append(CameraParams.look_at(eye, (0.0, 0.0, 0.0), focal=(focal, focal),
                                         principal_point=(image_size / 2, image_size / 2)))
    return cams


def render_observations(seq: MotionSequence, cameras: list[CameraParams], noise_std_2d: float,
                        rng: np.random.Generator, camera_ids=None) -> list[Observation2D]:
    """Project through each camera and add iid pixel noise; confidences are 1."""
    ids = camera_ids or [f"cam{i}" for i in range(len(cameras))]
    out = []
    for cid, cam in zip(ids, cameras):
        proj = project_array(seq.positions, seq.root_trajectory, cam)
        if not proj.valid_mask.any():
            raise AllPointsBehindCamera(f"camera {cid} sees no joint")
        px = np.where(proj.valid_mask[..., None], proj.pixels, 0.0)
        if noise_std_2d > 0:
            px = px + rng.normal(0.0, noise_std_2d, size=px.shape)
        out.append(Observation2D(cid, px, np.ones(px.shape[:2])))
    return out
