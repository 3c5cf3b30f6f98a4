"""Rewards, the proxy quality scorer, and per-image reward normalisation."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from restorl.bench import TASKS, degrade, procedural_image

SCORE_MIN, SCORE_MAX = 1.0, 5.0
SCORER_FORMAT_VERSION = 1
# generic distortions the scorer also learns, on top of the benchmark tasks
SCORER_EXTRA = ("exposure", "noise")
MAX_EXPOSURE_OFFSET = 0.15
MAX_WHITE_NOISE = 0.15


class RewardServiceError(RuntimeError):
    """A reward backend failed; training must stop rather than continue on bad rewards."""


def scorer_distortion(image: np.ndarray, kind: str, severity: float, rng: np.random.Generator) -> np.ndarray:
    """A benchmark degradation, or one of the scorer-only generic distortions.

    ``exposure`` brightens or darkens with equal probability (gamma 2^(-/+s) plus
    an offset); ``noise`` adds white Gaussian noise of std 0.15 s.
    """
    if kind in TASKS:
        return degrade(image, kind, severity, rng)
    s = severity
    if kind == "exposure":
        sign = 1.0 if rng.random() < 0.5 else -1.0
        out = image ** (2.0 ** (-sign * s)) + sign * MAX_EXPOSURE_OFFSET * s
    elif kind == "noise":
        out = image + MAX_WHITE_NOISE * s * rng.standard_normal(image.shape)
    else:
        raise ValueError(f"unknown distortion {kind!r}")
    return np.clip(out, 0.0, 1.0)


def reconstruction_reward(x_hat, g) -> float:
    """Negated Euclidean distance to the ground truth (0 is the best possible value)."""
    x_hat, g = np.asarray(x_hat, dtype=np.float64), np.asarray(g, dtype=np.float64)
    if x_hat.shape != g.shape:
        raise ValueError(f"shape mismatch {x_hat.shape} vs {g.shape}")
    return -float(np.linalg.norm((x_hat - g).ravel()))


def severity_label(severity) -> np.ndarray:
    """Affine supervision target: severity 0 -> 5.0, severity 1 -> 1.0."""
    return SCORE_MAX - (SCORE_MAX - SCORE_MIN) * np.asarray(severity, dtype=np.float64)


class QualityScorer(nn.Module):
    """No-reference regressor squashed into [1, 5]."""

    def __init__(self, channels: int = 1, width: int = 16):
        super().__init__()
        self.channels, self.width = channels, width
        self.features = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.head = nn.Sequential(nn.Linear(4 * width + 5, 32), nn.SiLU(), nn.Linear(32, 1))

    @staticmethod
    def global_stats(x: torch.Tensor) -> torch.Tensor:
        # brightness, contrast, edge energy, high-frequency energy, saturated fraction
        gx = x[..., :, 1:] - x[..., :, :-1]
        gy = x[..., 1:, :] - x[..., :-1, :]
        lap = 4 * x[..., 1:-1, 1:-1] - x[..., :-2, 1:-1] - x[..., 2:, 1:-1] - x[..., 1:-1, :-2] - x[..., 1:-1, 2:]
        return torch.stack([
            x.mean((1, 2, 3)), x.std((1, 2, 3)),
            gx.abs().mean((1, 2, 3)) + gy.abs().mean((1, 2, 3)),
            lap.abs().mean((1, 2, 3)),
            (x > 0.97).to(x.dtype).mean((1, 2, 3)),
        ], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        pooled = torch.cat([h.mean((2, 3)), h.std((2, 3)), 4 * self.global_stats(x)], dim=1)
        return SCORE_MIN + (SCORE_MAX - SCORE_MIN) * torch.sigmoid(self.head(pooled)[:, 0])


@dataclass
class ScorerParams:
    model: QualityScorer
    metadata: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        payload = {"format_version": SCORER_FORMAT_VERSION,
                   "channels": self.model.channels, "width": self.model.width,
                   "params": self.model.state_dict(), "metadata": self.metadata}
        buf = io.BytesIO()
        torch.save(payload, buf)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "ScorerParams":
        payload = torch.load(io.BytesIO(Path(path).read_bytes()), weights_only=False)
        if payload.get("format_version") != SCORER_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported scorer format {payload.get('format_version')!r}")
        model = QualityScorer(payload["channels"], payload["width"])
        model.load_state_dict(payload["params"])
        return cls(model.eval(), payload["metadata"])


@torch.no_grad()
def score_images(scorer: ScorerParams, images, batch_size: int = 256) -> np.ndarray:
    """Scores for a stack of ``(N, C, H, W)`` images already clamped to [0, 1]."""
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if not torch.isfinite(x).all():
        raise ValueError("non-finite input to the quality scorer")
    scorer.model.eval()
    out = [scorer.model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return torch.cat(out).double().numpy()


def iqa_reward(scorer: ScorerParams, image) -> float:
    image = np.asarray(image, dtype=np.float64)
    return float(score_images(scorer, image[None])[0])


@dataclass
class ScorerConfig:
    tasks: tuple[str, ...] = TASKS + SCORER_EXTRA
    n_images: int = 120
    n_heldout: int = 40
    severities: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    size: int = 32
    channels: int = 1
    width: int = 12
    epochs: int = 15
    batch_size: int = 64
    lr: float = 2e-3


def scorer_corpus(config: ScorerConfig, seed: int, heldout: bool = False):
    """Ground truths (severity 0) plus every task x severity degradation of them.

    Returns ``(images, severities, base_index)``.
    """
    n = config.n_heldout if heldout else config.n_images
    rng = np.random.default_rng([seed, 1 if heldout else 0])
    images, sevs, base = [], [], []
    for i in range(n):
        gt = procedural_image(rng, config.size, config.channels)
        images.append(gt)
        sevs.append(0.0)
        base.append(i)
        for task in config.tasks:
            for s in config.severities:
                images.append(scorer_distortion(gt, task, s, rng))
                sevs.append(s)
                base.append(i)
    return np.stack(images), np.asarray(sevs), np.asarray(base)


def _fit(model: QualityScorer, images: np.ndarray, labels: np.ndarray, epochs: int,
         batch_size: int, lr: float, generator: torch.Generator) -> list[float]:
    x = torch.as_tensor(images, dtype=torch.float32)
    y = torch.as_tensor(labels, dtype=torch.float32)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    losses = []
    model.train()
    for _ in range(epochs):
        perm = torch.randperm(len(x), generator=generator)
        total = 0.0
        for i in range(0, len(x), batch_size):
            idx = perm[i:i + batch_size]
            loss = F.mse_loss(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(x))
    model.eval()
    return losses


def train_quality_scorer(config: ScorerConfig, seed: int) -> ScorerParams:
    """Fit the proxy scorer on synthetic degradations labelled by severity."""
    if len(set(config.severities)) < 3:
        raise ValueError("need at least 3 distinct severity levels to train the scorer")
    images, sevs, _ = scorer_corpus(config, seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = QualityScorer(config.channels, config.width)
    gen = torch.Generator().manual_seed(seed)
    losses = _fit(model, images, severity_label(sevs), config.epochs, config.batch_size, config.lr, gen)
    meta = {"label_scheme": "5 - 4*severity", "epochs": config.epochs, "seed": seed,
            "tasks": list(config.tasks), "final_loss": losses[-1], "refreshes": 0}
    return ScorerParams(model, meta)


def refresh_scorer(scorer: ScorerParams, outputs: np.ndarray, gts: np.ndarray, seed: int,
                   reference_rmse: float = 0.25, epochs: int = 3, lr: float = 5e-4,
                   replay: ScorerConfig | None = None) -> ScorerParams:
    """Relabel current model outputs by residual severity and fine-tune the scorer.

    An output with RMSE ``e`` against its ground truth gets severity
    ``min(1, e / reference_rmse)``; ground truths are relabelled 5. A slice of the
    original synthetic corpus is replayed so earlier degradations are not forgotten.
    """
    rmse = np.sqrt(((outputs - gts) ** 2).reshape(len(outputs), -1).mean(1))
    sev = np.clip(rmse / reference_rmse, 0.0, 1.0)
    images = [outputs, gts]
    labels = [severity_label(sev), np.full(len(gts), SCORE_MAX)]
    if replay is not None:
        r_img, r_sev, _ = scorer_corpus(replay, seed)
        keep = np.random.default_rng(seed).choice(len(r_img), size=min(len(r_img), 8 * len(outputs)), replace=False)
        images.append(r_img[keep])
        labels.append(severity_label(r_sev[keep]))
    gen = torch.Generator().manual_seed(seed)
    _fit(scorer.model, np.concatenate(images), np.concatenate(labels), epochs, 64, lr, gen)
    scorer.metadata["refreshes"] = scorer.metadata.get("refreshes", 0) + 1
    return scorer


def spearman(a, b) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).statistic)


def evaluate_scorer(scorer: ScorerParams, config: ScorerConfig, seed: int) -> dict:
    """Held-out checks: severity rank correlation and ground-truth vs severity-0.8 separation."""
    images, sevs, base = scorer_corpus(config, seed, heldout=True)
    scores = score_images(scorer, images)
    gt_scores = scores[sevs == 0]
    hard = np.isclose(sevs, 0.8)
    hard_scores = scores[hard]
    gt_by_base = dict(zip(base[sevs == 0], gt_scores))
    wins = np.mean([gt_by_base[b] > s for b, s in zip(base[hard], hard_scores)])
    return {
        "spearman_vs_severity": spearman(scores, -sevs),
        "mean_gt": float(gt_scores.mean()),
        "mean_sev08": float(hard_scores.mean()),
        "gt_beats_sev08": float(wins),
    }


@dataclass
class TrackEntry:
    mean: float = 0.0
    var: float = 0.0
    count: int = 0


@dataclass
class RewardStats:
    """Per-key exponential reward track plus the current batch buffer.

    The update weight for the n-th observation of a key is ``max(1 - decay, 1/n)``:
    a plain running mean while few observations exist, an exponential moving
    average afterwards. ``decay = 1`` keeps the exact running mean/variance.
    """

    decay: float = 0.9
    mix: float = 0.5
    eps_var: float = 1e-8
    min_count: int = 2
    track: dict[Hashable, TrackEntry] = field(default_factory=dict)
    batch: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if not 0 <= self.mix <= 1:
            raise ValueError("mix must lie in [0, 1]")
        if self.eps_var <= 0:
            raise ValueError("eps_var must be positive")

    def update(self, key: Hashable, rewards: Sequence[float]) -> "RewardStats":
        rewards = np.atleast_1d(np.asarray(rewards, dtype=np.float64))
        if not np.all(np.isfinite(rewards)):
            raise ValueError("rewards must be finite")
        e = self.track.setdefault(key, TrackEntry())
        for r in rewards:
            e.count += 1
            a = max(1.0 - self.decay, 1.0 / e.count)
            delta = r - e.mean
            e.mean += a * delta
            e.var = (1.0 - a) * (e.var + a * delta * delta)
        return self

    def set_batch(self, rewards: Sequence[float]) -> "RewardStats":
        rewards = np.asarray(rewards, dtype=np.float64).ravel()
        if not np.all(np.isfinite(rewards)):
            raise ValueError("rewards must be finite")
        self.batch = rewards
        return self

    def baseline(self, key: Hashable) -> tuple[float, float]:
        if self.batch.size == 0:
            raise ValueError("empty batch buffer")
        # moments about the first reward: an all-equal batch gives its value and 0 exactly
        ref = self.batch[0]
        d = self.batch - ref
        mu_b, var_b = float(ref + d.mean()), float(d.var())
        e = self.track.get(key)
        if e is None or e.count < self.min_count:
            return mu_b, var_b
        # interpolated so that agreeing sources pool to the same value without rounding
        return mu_b + self.mix * (e.mean - mu_b), var_b + self.mix * (e.var - var_b)

    def advantage(self, reward: float, key: Hashable) -> float:
        mu, var = self.baseline(key)
        return (reward - mu) / math.sqrt(var + self.eps_var)


def update_stats(stats: RewardStats, image_id: Hashable, new_rewards) -> RewardStats:
    return stats.update(image_id, new_rewards)


def advantage(reward: float, stats: RewardStats, image_id: Hashable) -> float:
    return stats.advantage(reward, image_id)


RewardFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class ProxyReward:
    name = "proxy"

    def __init__(self, scorer: ScorerParams):
        self.scorer = scorer

    def __call__(self, images: np.ndarray, gts: np.ndarray) -> np.ndarray:
        return score_images(self.scorer, images)


class ReconstructionReward:
    name = "reconstruction"

    def __call__(self, images: np.ndarray, gts: np.ndarray) -> np.ndarray:
        return np.array([reconstruction_reward(x, g) for x, g in zip(images, gts)])
