"""Encoder-only transformer that maps a noisy sequence x_t to a clean estimate of x_0.

Token 0 carries the embedded diffusion timestep; tokens 1..F are linear
projections of the per-frame poses plus a fixed sinusoidal frame encoding.
Attention is bidirectional. Output tokens 1..F are decoded back to J x 3.

With ``skip_connection`` the decoded tokens D are combined with the input as
``sqrt(abar_t) * x_t + sqrt(1 - abar_t) * D``, the linear-optimal estimate
for unit-variance data plus a learned correction. At low noise the model is
then close to the identity without having to learn it.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import SequenceTooLong, ShapeMismatch, TimestepOutOfRange
from .schedule import make_schedule


@dataclass
class DenoiserConfig:
    joints: int = 17
    model_dim: int = 64
    layers: int = 4
    heads: int = 4
    ff_dim: int | None = None
    max_frames: int = 64
    max_timestep: int = 50
    dropout: float = 0.1
    skip_connection: bool = False
    schedule_kind: str = "linear"

    def __post_init__(self):
        if self.ff_dim is None:
            self.ff_dim = 4 * self.model_dim
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.max_frames < 1:
            raise ValueError("max_frames must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_encoding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer encoding, ``positions`` of any shape -> (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    angles = positions.to(torch.float64)[..., None] * freqs
    enc = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        enc = F.pad(enc, (0, 1))
    return enc


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, key_padding_mask=None):
        B, L, D = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(D // self.heads)
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = self.dropout(scores.softmax(dim=-1))
        y = (attn @ v).transpose(1, 2).reshape(B, L, D)
        return self.out(y)


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ff_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Linear(ff_dim, dim))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, key_padding_mask=None):
        x = x + self.dropout(self.attn(self.norm1(x), key_padding_mask))
        return x + self.dropout(self.ff(self.norm2(x)))


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.input_proj = nn.Linear(cfg.joints * 3, d)
        self.blocks = nn.ModuleList(
            EncoderBlock(d, cfg.heads, cfg.ff_dim, cfg.dropout) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(d)
        self.output_proj = nn.Linear(d, cfg.joints * 3)
        self.register_buffer(
            "frame_encoding",
            sinusoidal_encoding(torch.arange(cfg.max_frames), d).float(),
            persistent=False,
        )
        ab = make_schedule(cfg.max_timestep, cfg.schedule_kind).alpha_bar
        self.register_buffer("alpha_bar", torch.from_numpy(ab.copy()), persistent=False)

    def forward(self, x_t: torch.Tensor, t, frame_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Predict x_0.

        Args:
            x_t: ``B x F x J x 3`` (or unbatched ``F x J x 3``).
            t: int or length-B integer tensor of diffusion timesteps.
            frame_mask: optional ``B x F`` boolean, True for real (unpadded) frames.
        """
        unbatched = x_t.dim() == 3
        if unbatched:
            x_t = x_t[None]
            frame_mask = None if frame_mask is None else frame_mask[None]
        B, n_frames, J, C = x_t.shape
        if J != self.cfg.joints or C != 3:
            raise ShapeMismatch(f"expected F x {self.cfg.joints} x 3 input, got {tuple(x_t.shape)}")
        if not 1 <= n_frames <= self.cfg.max_frames:
            raise SequenceTooLong(f"{n_frames} frames, model supports 1..{self.cfg.max_frames}")
        t = torch.as_tensor(t, device=x_t.device).reshape(-1).expand(B)
        if torch.any(t < 0) or torch.any(t > self.cfg.max_timestep):
            raise TimestepOutOfRange(f"timestep outside [0, {self.cfg.max_timestep}]")

        dtype = x_t.dtype
        time_tok = self.time_mlp(sinusoidal_encoding(t, self.cfg.model_dim).to(dtype))
        frames = self.input_proj(x_t.reshape(B, n_frames, J * 3))
        frames = frames + self.frame_encoding[:n_frames].to(dtype)
        h = torch.cat([time_tok[:, None], frames], dim=1)

        pad = None
        if frame_mask is not None:
            pad = torch.cat([torch.zeros(B, 1, dtype=torch.bool, device=h.device), ~frame_mask], 1)
        for block in self.blocks:
            h = block(h, pad)
        out = self.output_proj(self.norm(h[:, 1:]))
        out = out.reshape(B, n_frames, J, 3)
        if self.cfg.skip_connection:
            ab = self.alpha_bar[t].to(dtype)[:, None, None, None]
            out = ab.sqrt() * x_t + (1 - ab).sqrt() * out
        return out[0] if unbatched else out


def masked_mse(pred: torch.Tensor, target: torch.Tensor,
               frame_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error over all (unpadded) frames, joints and coordinates."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    sq = (pred - target) ** 2
    if frame_mask is None:
        return sq.mean()
    w = frame_mask[..., None, None].to(sq.dtype).expand_as(sq)
    return (sq * w).sum() / w.sum()


def loss_and_gradient(model: Denoiser, x_t: torch.Tensor, t: torch.Tensor, x0: torch.Tensor,
                      frame_mask: torch.Tensor | None = None):
    """Training loss and its exact gradient w.r.t. every parameter.

    Returns ``(loss, grads)`` with ``grads`` keyed by parameter name. Existing
    ``.grad`` fields are overwritten.
    """
    if x_t.shape[0] == 0:
        raise ShapeMismatch("empty batch")
    if x_t.shape != x0.shape:
        raise ShapeMismatch(f"x_t {tuple(x_t.shape)} vs x0 {tuple(x0.shape)}")
    model.zero_grad(set_to_none=True)
    loss = masked_mse(model(x_t, t, frame_mask), x0, frame_mask)
    loss.backward()
    grads = {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
             for name, p in model.named_parameters()}
    return loss.detach(), grads
