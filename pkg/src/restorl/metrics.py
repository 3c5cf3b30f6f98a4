"""Fidelity and distribution metrics, and the append-only metrics log."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.signal import fftconvolve

PSNR_CEILING = 100.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5            # Gaussian window is (2*5+1)^2, truncated at 3.5 sigma
SSIM_K1, SSIM_K2 = 0.01, 0.03
FRECHET_RIDGE = 1e-6
OT_MAX_SIZE = 1024
METRICS_FORMAT_VERSION = 1


class CorruptLogError(RuntimeError):
    pass


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs return ``PSNR_CEILING``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CEILING
    return min(PSNR_CEILING, 10.0 * math.log10(peak * peak / mse))


def _gaussian_window(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def _ssim_maps(a: np.ndarray, b: np.ndarray, data_range: float, sigma: float, radius: int):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < 2 * radius + 1:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {2 * radius + 1}px SSIM window")
    w = _gaussian_window(sigma, radius)[None]
    filt = lambda x: fftconvolve(x, w, mode="valid", axes=(-2, -1))
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def ssim(a, b, data_range: float = 1.0, sigma: float = SSIM_SIGMA, radius: int = SSIM_RADIUS) -> float:
    """Mean structural similarity with a Gaussian window (population statistics).

    Accepts ``(H, W)`` or ``(C, H, W)``; channels are averaged.
    """
    lum, cs = _ssim_maps(np.asarray(a, float), np.asarray(b, float), data_range, sigma, radius)
    return float(np.mean(lum * cs))


def ssim_contrast_structure(a, b, data_range: float = 1.0, sigma: float = SSIM_SIGMA,
                            radius: int = SSIM_RADIUS) -> float:
    """Mean of the contrast-structure factor alone, which ignores local means."""
    _, cs = _ssim_maps(np.asarray(a, float), np.asarray(b, float), data_range, sigma, radius)
    return float(np.mean(cs))


def image_features(image: np.ndarray, pool: int = 8, bins: int = 8) -> np.ndarray:
    """Hand-crafted descriptor: average-pooled pixels plus a gradient-orientation histogram."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    pooled = image[:, : h - h % pool, : w - w % pool]
    pooled = pooled.reshape(c, pool, h // pool, pool, w // pool).mean((2, 4)).ravel()
    gy, gx = np.gradient(image, axis=(1, 2))
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    hist, _ = np.histogram(ang, bins=bins, range=(0, np.pi), weights=mag)
    return np.concatenate([pooled, hist / mag.size, [mag.mean()]])


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """Fréchet distance between two Gaussians.

    The cross term tr((S_a S_b)^{1/2}) is evaluated through the symmetric
    matrix S_a^{1/2} S_b S_a^{1/2}, whose eigenvalues are real and non-negative.
    """
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    evals, evecs = np.linalg.eigh(cov_a)
    root_a = (evecs * np.sqrt(np.clip(evals, 0, None))) @ evecs.T
    cross = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    tr_cross = np.sqrt(np.clip(cross, 0, None)).sum()
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_cross)
    return max(d, 0.0)


def _fit_gaussian(feats: np.ndarray, ridge: float):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    mu = feats.mean(0)
    cov = np.cov(feats, rowvar=False, bias=True) if len(feats) > 1 else np.zeros((feats.shape[1],) * 2)
    return mu, np.atleast_2d(cov) + ridge * np.eye(feats.shape[1])


def frechet_from_features(feats_a, feats_b, ridge: float = FRECHET_RIDGE) -> float:
    if len(feats_a) == 0 or len(feats_b) == 0:
        raise ValueError("both feature sets must be non-empty")
    return frechet_distance(*_fit_gaussian(feats_a, ridge), *_fit_gaussian(feats_b, ridge))


def frechet_proxy(set_a: Sequence[np.ndarray], set_b: Sequence[np.ndarray], ridge: float = FRECHET_RIDGE) -> float:
    """Fréchet distance between Gaussians fitted to :func:`image_features` of two image sets.

    A ridge of ``ridge * I`` is added to both covariances so small sets stay well-posed.
    """
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("both image sets must be non-empty")
    fa = np.stack([image_features(x) for x in set_a])
    fb = np.stack([image_features(x) for x in set_b])
    return frechet_from_features(fa, fb, ridge)


def empirical_ot_cost(set_a, set_b, cost: str = "l2") -> float:
    """Exact optimal-transport cost between two equal-size empirical sets.

    Uniform weights reduce the problem to an assignment; the mean matched
    Euclidean distance is returned.
    """
    if cost != "l2":
        raise ValueError(f"unsupported cost {cost!r}")
    a = np.asarray([np.ravel(x) for x in set_a], dtype=np.float64)
    b = np.asarray([np.ravel(x) for x in set_b], dtype=np.float64)
    if len(a) != len(b):
        raise ValueError(f"sets must have equal size, got {len(a)} and {len(b)}")
    if len(a) == 0:
        raise ValueError("sets must be non-empty")
    if len(a) > OT_MAX_SIZE:
        raise ValueError(f"set size {len(a)} exceeds the exact-solver cap of {OT_MAX_SIZE}")
    c = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    rows, cols = linear_sum_assignment(c)
    return float(c[rows, cols].mean())


@dataclass
class MetricsRecord:
    iteration: int
    psnr: float | None = None
    ssim: float | None = None
    frechet_proxy: float | None = None
    ot_cost: float | None = None
    mean_reward: float | None = None
    extra: dict = field(default_factory=dict)
    per_task: dict = field(default_factory=dict)

    def validate(self) -> None:
        for k, v in asdict(self).items():
            if isinstance(v, float) and not math.isfinite(v):
                raise ValueError(f"metric {k} is not finite: {v}")


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class RunStore:
    """Line-delimited JSON metrics log with a version header and per-record checksums."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def init(self) -> "RunStore":
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(_canonical({"format": "restorl-metrics", "version": METRICS_FORMAT_VERSION}) + "\n")
        return self

    def append(self, record: MetricsRecord) -> None:
        if not self.path.exists():
            raise FileNotFoundError(f"run store {self.path} not initialised")
        record.validate()
        last = self.records()
        if last and record.iteration < last[-1].iteration:
            raise ValueError("iterations must be non-decreasing within a run log")
        body = asdict(record)
        line = _canonical({"record": body, "sha256": hashlib.sha256(_canonical(body).encode()).hexdigest()})
        with open(self.path, "a") as fh:
            fh.write(line + "\n")

    def records(self) -> list[MetricsRecord]:
        if not self.path.exists():
            return []
        lines = self.path.read_text().splitlines()
        if not lines:
            return []
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise CorruptLogError(f"{self.path}: unreadable header") from exc
        if header.get("format") != "restorl-metrics" or header.get("version") != METRICS_FORMAT_VERSION:
            raise CorruptLogError(f"{self.path}: unsupported log header {header}")
        out = []
        for n, line in enumerate(lines[1:], start=2):
            try:
                entry = json.loads(line)
                body = entry["record"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorruptLogError(f"{self.path}:{n}: malformed record") from exc
            if hashlib.sha256(_canonical(body).encode()).hexdigest() != entry.get("sha256"):
                raise CorruptLogError(f"{self.path}:{n}: checksum mismatch")
            out.append(MetricsRecord(**body))
        return out


def log_metrics(store: RunStore, record: MetricsRecord) -> None:
    store.append(record)


def spearman_rho(values: Iterable[float]) -> float:
    """Spearman correlation of a sequence against its index."""
    from scipy.stats import spearmanr

    v = np.asarray(list(values), dtype=np.float64)
    if len(v) < 2 or np.all(v == v[0]):
        return 0.0
    return float(spearmanr(np.arange(len(v)), v).statistic)


def smooth(values: Sequence[float], window: int = 5) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)
