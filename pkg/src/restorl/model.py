"""Conditional noise-prediction network, supervised diffusion loss, optimisation and checkpoints."""

from __future__ import annotations

import copy
import hashlib
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn
import torch.nn.functional as F

from restorl.diffusion import DiffusionSchedule, forward_sample_batch

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointVersionError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    channels: int = 1
    width: int = 16
    depth: int = 2
    emb_dim: int = 16
    dtype: str = "float32"

    def validate(self) -> None:
        for name in ("channels", "width", "depth", "emb_dim"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValueError(f"arch.{name} must be a positive integer, got {v!r}")
        if self.emb_dim % 2:
            raise ValueError("arch.emb_dim must be even")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)


def parameter_count(arch: ArchConfig) -> int:
    """Closed-form parameter count of :class:`Denoiser` for ``arch``."""
    c, w, e = arch.channels, arch.width, arch.emb_dim
    stem = 2 * c * w * 9 + w
    block = w * w * 9 + w + e * w + w
    head = w * c * 9 + c
    return stem + arch.depth * block + head


def timestep_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1).to(dtype)


class Denoiser(nn.Module):
    """Small residual CNN predicting the injected noise.

    The noisy grid is concatenated with the condition (the degraded image) on
    the channel axis; a projected sinusoidal timestep embedding is added in
    every residual block.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        arch.validate()
        self.arch = arch
        c, w = arch.channels, arch.width
        self.stem = nn.Conv2d(2 * c, w, 3, padding=1)
        self.convs = nn.ModuleList([nn.Conv2d(w, w, 3, padding=1) for _ in range(arch.depth)])
        self.temb = nn.ModuleList([nn.Linear(arch.emb_dim, w) for _ in range(arch.depth)])
        self.head = nn.Conv2d(w, c, 3, padding=1)

    def forward(self, x_t: torch.Tensor, cond: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = timestep_embedding(t, self.arch.emb_dim, x_t.dtype)
        h = F.silu(self.stem(torch.cat([x_t, cond], dim=1)))
        for conv, lin in zip(self.convs, self.temb):
            h = h + F.silu(conv(h) + lin(emb)[:, :, None, None])
        return self.head(h)


def init_model(arch: ArchConfig, seed: int) -> Denoiser:
    """Deterministically initialised denoiser; the output head starts at zero."""
    arch.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Denoiser(arch)
        nn.init.zeros_(model.head.weight)
        nn.init.zeros_(model.head.bias)
    return model.to(arch.torch_dtype)


def frozen_copy(model: nn.Module) -> nn.Module:
    old = copy.deepcopy(model)
    old.requires_grad_(False)
    return old


def per_sample_sft_loss(model: nn.Module, x0: torch.Tensor, cond: torch.Tensor,
                        schedule: DiffusionSchedule, generator: torch.Generator) -> torch.Tensor:
    """Noise-prediction MSE for each sample with its own random (t, eps); shape ``(B,)``."""
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    dtype = next(model.parameters()).dtype
    x0 = x0.to(torch.float64)
    t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=torch.float64)
    x_t = forward_sample_batch(x0, t, eps, schedule)
    pred = model(x_t.to(dtype), cond.to(dtype), t)
    return ((pred - eps.to(dtype)) ** 2).flatten(1).mean(1)


def sft_loss(model, x0, cond, schedule, generator) -> torch.Tensor:
    return per_sample_sft_loss(model, x0, cond, schedule, generator).mean()


def model_digest(model: nn.Module) -> str:
    """Short content hash of the parameters, in state-dict order."""
    h = hashlib.sha256()
    for name, v in model.state_dict().items():
        h.update(name.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def make_optimizer(model: nn.Module, kind: str = "adam", lr: float = 1e-3) -> torch.optim.Optimizer:
    if kind == "adam":
        return torch.optim.Adam(model.parameters(), lr=lr)
    if kind == "sgd":
        return torch.optim.SGD(model.parameters(), lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def apply_update(model: nn.Module, optimizer: torch.optim.Optimizer,
                 max_grad_norm: float | None = None) -> float:
    """Take one optimizer step from the gradients currently stored on ``model``.

    Returns the pre-clipping gradient norm. Raises before touching any
    parameter if a gradient is non-finite.
    """
    grads = [p.grad for p in model.parameters() if p.grad is not None]
    if not grads:
        return 0.0
    norm = torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads]))
    if not torch.isfinite(norm):
        bad = [n for n, p in model.named_parameters() if p.grad is not None and not torch.isfinite(p.grad).all()]
        raise NonFiniteGradientError(f"non-finite gradients in {bad}")
    if max_grad_norm is not None and max_grad_norm > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), max_grad_norm)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return float(norm)


@dataclass
class Checkpoint:
    model: Denoiser
    optimizer_state: dict | None
    schedule_digest: str
    step: int
    rng_state: Any
    config: dict
    extra: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        payload = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "arch": asdict(self.model.arch),
            "params": {k: v.detach().clone() for k, v in self.model.state_dict().items()},
            "optimizer_state": self.optimizer_state,
            "schedule_digest": self.schedule_digest,
            "step": self.step,
            "rng_state": self.rng_state,
            "config": self.config,
            "extra": self.extra,
        }
        buf = io.BytesIO()
        torch.save(payload, buf)
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        payload = torch.load(io.BytesIO(Path(path).read_bytes()), weights_only=False)
        version = payload.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointVersionError(
                f"{path}: checkpoint format {version!r}, expected {CHECKPOINT_FORMAT_VERSION}")
        arch = ArchConfig(**payload["arch"])
        model = Denoiser(arch).to(arch.torch_dtype)
        model.load_state_dict(payload["params"])
        return cls(model, payload["optimizer_state"], payload["schedule_digest"],
                   payload["step"], payload["rng_state"], payload["config"], payload.get("extra", {}))
