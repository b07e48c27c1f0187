"""Shared data types, validation and binary/JSON serialization.

All arrays are stored read-only. Poses are root-relative (the root joint sits
at the origin every frame) and the world-frame root translation is kept
separately, since the root trajectory is treated as known.

File formats (all little-endian, no padding):

``.mseq``
    ``b"MSEQ"``, u32 version (1), u32 F, u32 J, u32 root_index, then
    F*J*3 float32 positions followed by F*3 float32 root trajectory.
``.obs2d``
    ``b"OBS2"``, u32 version (1), u32 F, u32 J, u32 C, then per camera:
    u32 id length, utf-8 id bytes, F*J*2 float32 keypoints, F*J float32
    confidences.
camera JSON
    ``{"rotation": [9 row-major], "translation": [3], "focal": [2],
    "principal_point": [2]}``.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    CorruptHeader,
    CyclicHierarchy,
    FormatVersionMismatch,
    InvalidValue,
    IoFailure,
    MultipleRoots,
    TooFewJoints,
)

FORMAT_VERSION = 1
MSEQ_MAGIC = b"MSEQ"
OBS_MAGIC = b"OBS2"

H36M_JOINT_NAMES = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)
H36M_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple[str, ...]
    parent: tuple[int, ...]
    root_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "parent", tuple(int(p) for p in self.parent))

    @property
    def num_joints(self) -> int:
        return len(self.parent)

    def depth(self, j: int) -> int:
        d = 0
        while self.parent[j] >= 0:
            j = self.parent[j]
            d += 1
        return d

    def topological_order(self) -> list[int]:
        """Joints ordered so every parent precedes its children."""
        return sorted(range(self.num_joints), key=self.depth)


def h36m_skeleton() -> Skeleton:
    return Skeleton(H36M_JOINT_NAMES, H36M_PARENTS, 0)


def validate_skeleton(s: Skeleton) -> None:
    """Raise if ``s`` is not a single tree rooted at ``s.root_index``."""
    J = len(s.parent)
    if J < 2:
        raise TooFewJoints(f"skeleton needs at least 2 joints, got {J}")
    if len(s.joint_names) != J:
        raise InvalidValue("joint_names and parent differ in length")
    if not 0 <= s.root_index < J:
        raise InvalidValue(f"root_index {s.root_index} out of range")
    roots = [j for j, p in enumerate(s.parent) if p < 0]
    if len(roots) > 1:
        raise MultipleRoots(f"joints {roots} have no parent")
    if any(p >= J for p in s.parent):
        raise InvalidValue("parent index out of range")
    # walk each joint upward; revisiting a joint means a cycle
    for j in range(J):
        seen = {j}
        k = s.parent[j]
        while k >= 0:
            if k in seen:
                raise CyclicHierarchy(f"joint {j} reaches a cycle through {k}")
            seen.add(k)
            k = s.parent[k]
    if not roots:
        raise CyclicHierarchy("no root joint: every joint has a parent")
    if roots[0] != s.root_index:
        raise MultipleRoots(
            f"parentless joint {roots[0]} differs from root_index {s.root_index}")


@dataclass(frozen=True)
class MotionSequence:
    """Root-relative keypoint trajectory.

    ``positions`` is F x J x 3 (meters, root joint pinned at zero) and
    ``root_trajectory`` is F x 3 in the world frame. Arrays are float32 so
    that the on-disk format round-trips bit-exactly.
    """

    positions: np.ndarray
    root_trajectory: np.ndarray
    root_index: int = 0

    def __post_init__(self):
        pos = _frozen(self.positions, np.float32)
        root = _frozen(self.root_trajectory, np.float32)
        if pos.ndim != 3 or pos.shape[2] != 3 or pos.shape[0] < 1:
            raise InvalidValue(f"positions must be F x J x 3 with F >= 1, got {pos.shape}")
        if root.shape != (pos.shape[0], 3):
            raise InvalidValue(f"root_trajectory must be {(pos.shape[0], 3)}, got {root.shape}")
        if not 0 <= self.root_index < pos.shape[1]:
            raise InvalidValue(f"root_index {self.root_index} out of range")
        if not (np.isfinite(pos).all() and np.isfinite(root).all()):
            raise InvalidValue("motion contains non-finite values")
        if np.any(pos[:, self.root_index] != 0):
            raise InvalidValue("positions must be root-relative (root joint at origin)")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "root_trajectory", root)

    @classmethod
    def from_world(cls, world: np.ndarray, root_index: int = 0) -> "MotionSequence":
        """Split world-frame joints (F x J x 3) into root-relative poses + root track."""
        world = np.asarray(world, dtype=np.float64)
        root = world[:, root_index].copy()
        rel = (world - root[:, None]).astype(np.float32)
        rel[:, root_index] = 0.0
        return cls(rel, root.astype(np.float32), root_index)

    @classmethod
    def from_relative(cls, positions: np.ndarray, root_trajectory: np.ndarray,
                      root_index: int = 0) -> "MotionSequence":
        """Build from possibly unpinned relative poses by zeroing the root rows."""
        pos = np.array(positions, dtype=np.float32, copy=True)
        pos[:, root_index] = 0.0
        return cls(pos, root_trajectory, root_index)

    @property
    def frames(self) -> int:
        return self.positions.shape[0]

    @property
    def joints(self) -> int:
        return self.positions.shape[1]

    def world(self) -> np.ndarray:
        return self.positions.astype(np.float64) + self.root_trajectory.astype(np.float64)[:, None]


@dataclass(frozen=True)
class Observation2D:
    camera_id: str
    keypoints: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        kp = _frozen(self.keypoints, np.float32)
        conf = _frozen(self.confidence, np.float32)
        if kp.ndim != 3 or kp.shape[2] != 2:
            raise InvalidValue(f"keypoints must be F x J x 2, got {kp.shape}")
        if conf.shape != kp.shape[:2]:
            raise InvalidValue(f"confidence must be {kp.shape[:2]}, got {conf.shape}")
        if not np.isfinite(kp).all():
            raise InvalidValue("keypoints contain non-finite values")
        if not np.isfinite(conf).all() or np.any(conf < 0):
            raise InvalidValue("confidence must be finite and non-negative")
        object.__setattr__(self, "camera_id", str(self.camera_id))
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "confidence", conf)

    @property
    def frames(self) -> int:
        return self.keypoints.shape[0]

    @property
    def joints(self) -> int:
        return self.keypoints.shape[1]

    def with_confidence(self, confidence: np.ndarray) -> "Observation2D":
        return Observation2D(self.camera_id, self.keypoints, confidence)


@dataclass(frozen=True)
class CameraParams:
    """Pinhole camera; ``rotation``/``translation`` map world to camera frame."""

    rotation: np.ndarray
    translation: np.ndarray
    focal: np.ndarray
    principal_point: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation, np.float64).reshape(3, 3)
        t = _frozen(self.translation, np.float64).reshape(3)
        f = _frozen(self.focal, np.float64).reshape(2)
        c = _frozen(self.principal_point, np.float64).reshape(2)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise InvalidValue("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise InvalidValue("rotation determinant must be +1")
        if np.any(f <= 0):
            raise InvalidValue("focal lengths must be positive")
        if not (np.isfinite(t).all() and np.isfinite(c).all()):
            raise InvalidValue("camera parameters must be finite")
        for name, v in (("rotation", R), ("translation", t), ("focal", f), ("principal_point", c)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), focal=(1000.0, 1000.0),
                principal_point=(500.0, 500.0)) -> "CameraParams":
        """Camera at ``eye`` looking at ``target``; image y points down."""
        eye = np.asarray(eye, float)
        fwd = np.asarray(target, float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, float))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(R, -R @ eye, focal, principal_point)

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "focal": self.focal.tolist(),
            "principal_point": self.principal_point.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraParams":
        expected = {"rotation", "translation", "focal", "principal_point"}
        if set(d) != expected:
            raise CorruptHeader(f"camera JSON keys must be {sorted(expected)}, got {sorted(d)}")
        return cls(np.reshape(d["rotation"], (3, 3)), d["translation"], d["focal"],
                   d["principal_point"])


@dataclass(frozen=True)
class HypothesisSet:
    hypotheses: tuple[MotionSequence, ...]
    observation_ref: str = ""

    def __post_init__(self):
        hyps = tuple(self.hypotheses)
        if not hyps:
            raise InvalidValue("a hypothesis set needs at least one member")
        shape = hyps[0].positions.shape
        for h in hyps[1:]:
            if h.positions.shape != shape:
                raise InvalidValue("hypotheses must share F and J")
            if not np.array_equal(h.root_trajectory, hyps[0].root_trajectory):
                raise InvalidValue("hypotheses must share the root trajectory")
        object.__setattr__(self, "hypotheses", hyps)

    @classmethod
    def from_array(cls, positions: np.ndarray, root_trajectory: np.ndarray,
                   root_index: int = 0, observation_ref: str = "") -> "HypothesisSet":
        """Wrap an N x F x J x 3 array of relative poses (root rows are zeroed)."""
        return cls(tuple(MotionSequence.from_relative(p, root_trajectory, root_index)
                         for p in positions), observation_ref)

    def __len__(self) -> int:
        return len(self.hypotheses)

    def __getitem__(self, i) -> MotionSequence:
        return self.hypotheses[i]

    @property
    def positions(self) -> np.ndarray:
        """N x F x J x 3 float64 stack."""
        return np.stack([h.positions for h in self.hypotheses]).astype(np.float64)

    @property
    def root_trajectory(self) -> np.ndarray:
        return self.hypotheses[0].root_trajectory

    @property
    def root_index(self) -> int:
        return self.hypotheses[0].root_index


# ---------------------------------------------------------------------------
# serialization

def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _write_bytes(path, data: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptHeader(f"{self.what}: truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self, shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise CorruptHeader(f"{self.what}: {len(self.buf) - self.pos} trailing bytes")


def _check_magic(r: _Reader, magic: bytes) -> None:
    if r.take(4) != magic:
        raise CorruptHeader(f"{r.what}: bad magic, expected {magic!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"{r.what}: version {version}, expected {FORMAT_VERSION}")


def motion_to_bytes(seq: MotionSequence) -> bytes:
    F, J = seq.positions.shape[:2]
    head = MSEQ_MAGIC + struct.pack("<IIII", FORMAT_VERSION, F, J, seq.root_index)
    return head + seq.positions.astype("<f4").tobytes() + seq.root_trajectory.astype("<f4").tobytes()


def motion_from_bytes(buf: bytes, what: str = "mseq") -> MotionSequence:
    r = _Reader(buf, what)
    _check_magic(r, MSEQ_MAGIC)
    F, J, root_index = r.u32(), r.u32(), r.u32()
    if F < 1 or J < 1 or root_index >= J:
        raise CorruptHeader(f"{what}: invalid header F={F} J={J} root={root_index}")
    pos = r.f32((F, J, 3))
    root = r.f32((F, 3))
    r.done()
    return MotionSequence(pos, root, root_index)


def write_motion(seq: MotionSequence, path) -> None:
    _write_bytes(path, motion_to_bytes(seq))


def read_motion(path) -> MotionSequence:
    return motion_from_bytes(_read_bytes(path), str(path))


def write_observations(obs: Sequence[Observation2D], path) -> None:
    if not obs:
        raise InvalidValue("need at least one observation")
    F, J = obs[0].keypoints.shape[:2]
    parts = [OBS_MAGIC, struct.pack("<IIII", FORMAT_VERSION, F, J, len(obs))]
    for o in obs:
        if o.keypoints.shape[:2] != (F, J):
            raise InvalidValue("observations must share F and J")
        cid = o.camera_id.encode("utf-8")
        parts += [struct.pack("<I", len(cid)), cid,
                  o.keypoints.astype("<f4").tobytes(), o.confidence.astype("<f4").tobytes()]
    _write_bytes(path, b"".join(parts))


def read_observations(path) -> list[Observation2D]:
    r = _Reader(_read_bytes(path), str(path))
    _check_magic(r, OBS_MAGIC)
    F, J, C = r.u32(), r.u32(), r.u32()
    out = []
    for _ in range(C):
        cid = r.take(r.u32()).decode("utf-8")
        out.append(Observation2D(cid, r.f32((F, J, 2)), r.f32((F, J))))
    r.done()
    return out


def write_camera(cam: CameraParams, path) -> None:
    _write_bytes(path, json.dumps(cam.to_dict(), indent=2).encode())


def read_camera(path) -> CameraParams:
    try:
        d = json.loads(_read_bytes(path))
    except json.JSONDecodeError as exc:
        raise CorruptHeader(f"{path}: invalid JSON ({exc})") from exc
    return CameraParams.from_dict(d)


def write_hypotheses(h: HypothesisSet, directory) -> list[str]:
    """Write each hypothesis as ``h_XXXX.mseq`` inside ``directory``."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, seq in enumerate(h.hypotheses):
        p = os.path.join(directory, f"h_{i:04d}.mseq")
        write_motion(seq, p)
        paths.append(p)
    return paths


def read_hypotheses(directory, observation_ref: str = "") -> HypothesisSet:
    try:
        names = sorted(n for n in os.listdir(directory) if n.endswith(".mseq"))
    except OSError as exc:
        raise IoFailure(f"cannot list {directory}: {exc}") from exc
    if not names:
        raise IoFailure(f"no .mseq files in {directory}")
    return HypothesisSet(tuple(read_motion(os.path.join(directory, n)) for n in names),
                         observation_ref)
