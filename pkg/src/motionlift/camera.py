"""Pinhole projection and its closed-form Jacobian.

Functions accept relative poses with arbitrary leading batch dimensions
(``... x F x J x 3``) so that many hypotheses can be projected at once; the
root trajectory (F x 3) is a constant offset, not a free variable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_types import CameraParams, MotionSequence
from .errors import AllPointsBehindCamera, PointAtCameraPlane

Z_MIN = 1e-6


@dataclass(frozen=True)
class ProjectedKeypoints:
    pixels: np.ndarray  # ... x F x J x 2
    valid_mask: np.ndarray  # ... x F x J


def _camera_points(positions, root_trajectory, cam: CameraParams) -> np.ndarray:
    world = np.asarray(positions, np.float64) + np.asarray(root_trajectory, np.float64)[:, None, :]
    return world @ cam.rotation.T + cam.translation


def project_array(positions, root_trajectory, cam: CameraParams) -> ProjectedKeypoints:
    """Project ``positions + root_trajectory`` to pixels.

    Points at or behind ``Z_MIN`` are flagged invalid; their pixels are NaN.
    """
    pc = _camera_points(positions, root_trajectory, cam)
    z = pc[..., 2]
    valid = z > Z_MIN
    safe_z = np.where(valid, z, np.nan)
    u = cam.focal[0] * pc[..., 0] / safe_z + cam.principal_point[0]
    v = cam.focal[1] * pc[..., 1] / safe_z + cam.principal_point[1]
    return ProjectedKeypoints(np.stack([u, v], axis=-1), valid)


def project(seq: MotionSequence, cam: CameraParams) -> ProjectedKeypoints:
    out = project_array(seq.positions, seq.root_trajectory, cam)
    if not out.valid_mask.any():
        raise AllPointsBehindCamera("no point lies in front of the camera")
    return out


def project_jacobian_array(positions, root_trajectory, cam: CameraParams,
                           zero_invalid: bool = False) -> np.ndarray:
    """d(pixels)/d(positions), shape ``... x F x J x 2 x 3``.

    With ``zero_invalid`` the rows of points not in front of the camera are
    zero instead of raising.
    """
    pc = _camera_points(positions, root_trajectory, cam)
    x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
    if zero_invalid:
        valid = z > Z_MIN
        z = np.where(valid, z, 1.0)
        x, y = np.where(valid, x, 0.0), np.where(valid, y, 0.0)
    elif np.any(np.abs(z) < Z_MIN):
        raise PointAtCameraPlane("a point lies on the camera plane")
    fx, fy = cam.focal
    zero = np.zeros_like(z)
    d_cam = np.stack([
        np.stack([fx / z, zero, -fx * x / z**2], axis=-1),
        np.stack([zero, fy / z, -fy * y / z**2], axis=-1),
    ], axis=-2)
    jac = d_cam @ cam.rotation
    if zero_invalid:
        jac = np.where(valid[..., None, None], jac, 0.0)
    return jac


def project_jacobian(seq: MotionSequence, cam: CameraParams) -> np.ndarray:
    return project_jacobian_array(seq.positions, seq.root_trajectory, cam)
