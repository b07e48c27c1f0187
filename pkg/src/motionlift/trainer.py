"""Denoiser training loop and checkpoint container.

Checkpoint layout (little-endian): ``b"PLTY"``, u32 version, u32 JSON length,
JSON block, u32 tensor count, then per tensor: u32 name length, name bytes,
u32 rank, rank x u32 dims, float32 payload. The JSON block carries the
configuration, schedule kind, step counter, RNG states and loss history.
"""
from __future__ import annotations

import base64
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .core_types import MotionSequence
from .denoiser import Denoiser, DenoiserConfig, masked_mse
from .errors import (
    CorruptHeader,
    EmptyDataset,
    InconsistentJoints,
    InvalidValue,
    IoFailure,
    VersionMismatch,
)
from .schedule import NoiseSchedule, make_schedule, schedule_from_sigma

log = logging.getLogger(__name__)

CKPT_MAGIC = b"PLTY"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 32
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    seed: int = 0
    T: int = 50
    F_max: int = 32
    schedule_kind: str = "linear"
    grad_clip: float = 1.0
    model: DenoiserConfig = field(default_factory=DenoiserConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = DenoiserConfig(**self.model)
        if self.steps < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise InvalidValue("steps >= 1, batch_size >= 1 and learning_rate > 0 required")
        self.model.max_frames = max(self.model.max_frames, self.F_max)
        self.model.max_timestep = self.T
        self.model.schedule_kind = self.schedule_kind

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    config: TrainConfig
    schedule: NoiseSchedule
    model: Denoiser
    optimizer: torch.optim.AdamW
    step: int = 0
    numpy_rng_state: dict | None = None
    torch_rng_state: torch.Tensor | None = None
    loss_history: list[float] = field(default_factory=list)
    data_mean: np.ndarray | None = None  # J x 3, meters
    data_std: np.ndarray | None = None  # J x 3, meters

    def eval_model(self) -> Denoiser:
        self.model.eval()
        return self.model

    def normalize(self, x: np.ndarray) -> np.ndarray:
        """Meters -> the standardized space the diffusion runs in."""
        return (x - self.data_mean) / self.data_std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return z * self.data_std + self.data_mean


def _new_optimizer(model: Denoiser, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                             weight_decay=cfg.weight_decay)


def init_checkpoint(cfg: TrainConfig) -> Checkpoint:
    torch.manual_seed(cfg.seed)
    model = Denoiser(cfg.model)
    return Checkpoint(cfg, make_schedule(cfg.T, cfg.schedule_kind), model,
                      _new_optimizer(model, cfg), 0,
                      np.random.default_rng(cfg.seed).bit_generator.state,
                      torch.get_rng_state())


def _check_dataset(dataset: Sequence[MotionSequence]) -> int:
    if not dataset:
        raise EmptyDataset("training needs at least one sequence")
    J = dataset[0].joints
    if any(s.joints != J for s in dataset):
        raise InconsistentJoints("all training sequences must share J")
    return J


def feature_stats(dataset: Sequence[MotionSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Per joint-coordinate mean and std; constant coordinates (the root) get std 1."""
    allpos = np.concatenate([s.positions for s in dataset]).astype(np.float64)
    mean, std = allpos.mean(axis=0), allpos.std(axis=0)
    std = np.where(std > 1e-8, std, 1.0)
    # rounded to float32 so the checkpoint stores them exactly
    return mean.astype(np.float32).astype(np.float64), std.astype(np.float32).astype(np.float64)


def sample_crop_lengths(rng: np.random.Generator, lengths: np.ndarray) -> np.ndarray:
    """Crop length f ~ U{1..F} independently per batch element."""
    return rng.integers(1, lengths + 1)


def train(dataset: Sequence[MotionSequence], cfg: TrainConfig,
          resume: Checkpoint | None = None, log_every: int = 0) -> Checkpoint:
    """Run training until ``cfg.steps`` total optimizer steps have been taken.

    With ``resume`` the run continues from the checkpoint's step, RNG states
    and optimizer moments, reproducing an uninterrupted run exactly.
    """
    J = _check_dataset(dataset)
    if J != cfg.model.joints:
        raise InconsistentJoints(f"dataset has J={J}, model expects {cfg.model.joints}")
    ckpt = resume if resume is not None else init_checkpoint(cfg)
    ckpt.config = cfg
    model, opt, sched = ckpt.model, ckpt.optimizer, ckpt.schedule

    if ckpt.data_mean is None:
        ckpt.data_mean, ckpt.data_std = feature_stats(dataset)
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.numpy_rng_state
    torch.set_rng_state(ckpt.torch_rng_state)

    # the diffusion runs on standardized poses
    lengths = np.array([min(s.frames, cfg.F_max) for s in dataset])
    data = np.zeros((len(dataset), lengths.max(), J, 3), dtype=np.float32)
    for i, s in enumerate(dataset):
        data[i, :lengths[i]] = ckpt.normalize(s.positions[:lengths[i]])
    sqrt_ab = np.sqrt(sched.alpha_bar)
    sqrt_1mab = np.sqrt(1.0 - sched.alpha_bar)

    model.train()
    for step in range(ckpt.step, cfg.steps):
        idx = rng.integers(len(dataset), size=cfg.batch_size)
        t = rng.integers(1, cfg.T + 1, size=cfg.batch_size)
        f = sample_crop_lengths(rng, lengths[idx])
        width = int(f.max())
        x0 = data[idx, :width]
        mask = np.arange(width)[None, :] < f[:, None]
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        x_t = sqrt_ab[t, None, None, None] * x0 + sqrt_1mab[t, None, None, None] * eps
        x_t = np.where(mask[..., None, None], x_t, 0.0)

        x0_t = torch.from_numpy(np.ascontiguousarray(x0))
        mask_t = torch.from_numpy(mask)
        opt.zero_grad(set_to_none=True)
        loss = masked_mse(model(torch.from_numpy(x_t.astype(np.float32)), torch.from_numpy(t),
                                mask_t), x0_t, mask_t)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        ckpt.loss_history.append(loss.item())
        ckpt.step = step + 1
        if log_every and ckpt.step % log_every == 0:
            log.info("step %d loss %.5f", ckpt.step, np.mean(ckpt.loss_history[-log_every:]))

    ckpt.numpy_rng_state = rng.bit_generator.state
    ckpt.torch_rng_state = torch.get_rng_state()
    model.eval()
    return ckpt


# ---------------------------------------------------------------------------
# container format, shared with the baseline model

def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    blob = json.dumps(header).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode()
        parts += [struct.pack("<I", len(key)), key, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if buf[:4] != CKPT_MAGIC:
        raise VersionMismatch(f"{path}: not a checkpoint (magic {buf[:4]!r})")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CorruptHeader(f"{path}: truncated checkpoint")
        pos += n
        return buf[pos - n:pos]

    version, jlen = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    header = json.loads(take(jlen))
    tensors = {}
    for _ in range(struct.unpack("<I", take(4))[0]):
        name = take(struct.unpack("<I", take(4))[0]).decode()
        rank = struct.unpack("<I", take(4))[0]
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).copy()
    return header, tensors


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = {f"model.{k}": v.detach().numpy() for k, v in ckpt.model.state_dict().items()}
    names = dict(ckpt.model.named_parameters())
    adam_steps = {}
    for name, p in names.items():
        st = ckpt.optimizer.state.get(p)
        if st:
            tensors[f"opt.exp_avg.{name}"] = st["exp_avg"].numpy()
            tensors[f"opt.exp_avg_sq.{name}"] = st["exp_avg_sq"].numpy()
            adam_steps[name] = float(st["step"])
    tensors["schedule.sigma"] = ckpt.schedule.sigma
    tensors["data.mean"] = ckpt.data_mean
    tensors["data.std"] = ckpt.data_std
    header = {
        "section": "denoiser",
        "train": ckpt.config.to_dict(),
        "schedule": {"T": ckpt.schedule.T, "kind": ckpt.schedule.kind},
        "step": ckpt.step,
        "adam_steps": adam_steps,
        "numpy_rng": ckpt.numpy_rng_state,
        "torch_rng": base64.b64encode(ckpt.torch_rng_state.numpy().tobytes()).decode(),
        "loss_history": ckpt.loss_history,
    }
    write_container(path, header, tensors)


def load_checkpoint(path) -> Checkpoint:
    header, tensors = read_container(path)
    if header.get("section") != "denoiser":
        raise VersionMismatch(f"{path}: expected a denoiser checkpoint, got {header.get('section')}")
    cfg = TrainConfig(**header["train"])
    model = Denoiser(cfg.model)
    state = {k[len("model."):]: torch.from_numpy(v) for k, v in tensors.items()
             if k.startswith("model.")}
    model.load_state_dict(state)
    opt = _new_optimizer(model, cfg)
    for name, p in model.named_parameters():
        if name in header["adam_steps"]:
            opt.state[p] = {
                "step": torch.tensor(header["adam_steps"][name]),
                "exp_avg": torch.from_numpy(tensors[f"opt.exp_avg.{name}"]),
                "exp_avg_sq": torch.from_numpy(tensors[f"opt.exp_avg_sq.{name}"]),
            }
    # the float32 sigma table is only a record; the float64 schedule is rebuilt exactly
    sched = make_schedule(header["schedule"]["T"], header["schedule"]["kind"])
    if not np.allclose(sched.sigma.astype(np.float32), tensors["schedule.sigma"]):
        sched = schedule_from_sigma(tensors["schedule.sigma"], header["schedule"]["kind"])
    torch_rng = torch.from_numpy(
        np.frombuffer(base64.b64decode(header["torch_rng"]), dtype=np.uint8).copy())
    model.eval()
    return Checkpoint(cfg, sched, model, opt, header["step"], header["numpy_rng"], torch_rng,
                      list(header["loss_history"]), tensors["data.mean"].astype(np.float64),
                      tensors["data.std"].astype(np.float64))
