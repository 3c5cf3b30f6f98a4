"""Synthetic paired restoration data: procedural scenes, four degradations, on-disk datasets.

Dataset layout::

    <root>/manifest.json          version, task, seeds, severities, splits, sha256 per pair
    <root>/pairs/<id>.grid        one binary grid per pair

Grid file format (all integers little-endian)::

    bytes 0-7   magic b"RLGRID01"
    uint32      ndim
    uint32[n]   shape, here (2, C, H, W): index 0 is the ground truth, 1 the degraded image
    float64[]   payload, little-endian, C order
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from scipy import ndimage

TASKS = ("lowlight", "rain", "motion_blur", "defocus")
DATASET_FORMAT_VERSION = 1
GRID_MAGIC = b"RLGRID01"

# severity -> physical knob (all monotone increasing in severity)
MAX_GAMMA_EXTRA = 2.0       # gamma = 1 + 2 s
MAX_DIM = 0.6               # brightness scale = 1 - 0.6 s
MAX_NOISE = 0.08            # noise std = 0.08 s sqrt(signal + 0.01)
MAX_STREAK_DENSITY = 0.02   # streak seeds per pixel = 0.02 s
MAX_STREAK_LEN = 12         # streak length = 3 + 9 s
MAX_MOTION_LEN = 9          # motion kernel length = 1 + 8 s
MAX_DISK_RADIUS = 3.5       # disk radius = 3.5 s


class DatasetIntegrityError(RuntimeError):
    pass


@dataclass
class RestorationPair:
    gt: np.ndarray
    degraded: np.ndarray
    task: str
    severity: float
    id: str
    split: str = "train"


def motion_kernel(length: float, angle: float) -> np.ndarray:
    """Normalised line kernel of the given length (pixels) and angle (radians)."""
    if length <= 1.0:
        return np.ones((1, 1))
    half = (length - 1) / 2
    size = 2 * int(math.ceil(half)) + 1
    k = np.zeros((size, size))
    c = size // 2
    for u in np.linspace(-half, half, 8 * size):
        x, y = c + u * math.cos(angle), c - u * math.sin(angle)
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                            (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
            if 0 <= y0 + dy < size and 0 <= x0 + dx < size:
                k[y0 + dy, x0 + dx] += wgt
    return k / k.sum()


def disk_kernel(radius: float, supersample: int = 8) -> np.ndarray:
    """Normalised disk kernel with anti-aliased edge coverage."""
    if radius < 0.5:
        return np.ones((1, 1))
    r = int(math.ceil(radius))
    size = 2 * r + 1
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    k = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            yy = (i - r) + offs[:, None]
            xx = (j - r) + offs[None, :]
            k[i, j] = np.mean(xx ** 2 + yy ** 2 <= radius ** 2)
    return k / k.sum()


def _convolve(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.convolve(ch, kernel, mode="reflect") for ch in image])


def degrade(image: np.ndarray, task: str, severity: float, rng: np.random.Generator) -> np.ndarray:
    """Apply one synthetic degradation to a ``(C, H, W)`` image in [0, 1]."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if not (math.isfinite(severity) and 0 < severity <= 1):
        raise ValueError(f"severity must lie in (0, 1], got {severity}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError("image must have shape (C, H, W)")
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    s = severity
    if task == "lowlight":
        dark = (1 - MAX_DIM * s) * image ** (1 + MAX_GAMMA_EXTRA * s)
        std = MAX_NOISE * s * np.sqrt(dark + 0.01)
        out = dark + std * rng.standard_normal(image.shape)
    elif task == "rain":
        _, h, w = image.shape
        streaks = np.zeros((h, w))
        n = rng.binomial(h * w, MAX_STREAK_DENSITY * s)
        angle = math.pi / 2 + rng.uniform(-0.3, 0.3)
        length = 3 + (MAX_STREAK_LEN - 3) * s
        for _ in range(n):
            y, x = rng.uniform(0, h), rng.uniform(0, w)
            amp = rng.uniform(0.3, 0.3 + 0.5 * s)
            for u in np.linspace(0, length, int(2 * length) + 1):
                yy, xx = int(y - u * math.sin(angle)), int(x + u * math.cos(angle))
                if 0 <= yy < h and 0 <= xx < w:
                    streaks[yy, xx] = max(streaks[yy, xx], amp)
        out = image + streaks[None]
    elif task == "motion_blur":
        k = motion_kernel(1 + (MAX_MOTION_LEN - 1) * s, rng.uniform(0, math.pi))
        out = _convolve(image, k)
    else:
        out = _convolve(image, disk_kernel(MAX_DISK_RADIUS * s))
    return np.clip(out, 0.0, 1.0)


def procedural_image(rng: np.random.Generator, size: int = 32, channels: int = 1) -> np.ndarray:
    """Gradient background with a few shapes and a sinusoidal texture patch."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = np.empty((channels, size, size))
    for c in range(channels):
        a, b = rng.uniform(-0.4, 0.4, 2)
        img[c] = rng.uniform(0.35, 0.65) + a * (xx - 0.5) + b * (yy - 0.5)
    for _ in range(rng.integers(2, 5)):
        val = rng.uniform(0.1, 0.95, channels)
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(size / 10, size / 4)
        if rng.random() < 0.5:
            mask = (yy * (size - 1) - cy) ** 2 + (xx * (size - 1) - cx) ** 2 <= r ** 2
        else:
            mask = (np.abs(yy * (size - 1) - cy) <= r) & (np.abs(xx * (size - 1) - cx) <= r * rng.uniform(0.5, 1.5))
        img[:, mask] = val[:, None]
    y0, x0 = rng.integers(0, size // 2, 2)
    p = size // 2
    freq, phase, theta = rng.uniform(0.4, 1.2), rng.uniform(0, 2 * math.pi), rng.uniform(0, math.pi)
    py, px = np.mgrid[0:p, 0:p]
    tex = 0.15 * np.sin(freq * (px * math.cos(theta) + py * math.sin(theta)) + phase)
    img[:, y0:y0 + p, x0:x0 + p] += tex[None]
    return np.clip(img, 0.05, 0.95)


def folder_images(folder: str | Path, size: int = 32, channels: int = 1) -> Callable[[np.random.Generator], np.ndarray]:
    """Base-image generator drawing random crops from user-supplied images."""
    from PIL import Image

    paths = sorted(p for p in Path(folder).iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp"})
    if not paths:
        raise FileNotFoundError(f"no images in {folder}")

    def gen(rng: np.random.Generator) -> np.ndarray:
        im = Image.open(paths[rng.integers(len(paths))]).convert("L" if channels == 1 else "RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
        arr = arr[None] if channels == 1 else arr.transpose(2, 0, 1)
        h, w = arr.shape[1:]
        if h < size or w < size:
            raise ValueError("image smaller than crop size")
        y, x = rng.integers(0, h - size + 1), rng.integers(0, w - size + 1)
        return arr[:, y:y + size, x:x + size].copy()

    return gen


def write_grid(path: str | Path, array: np.ndarray) -> str:
    """Write ``array`` in the grid format; returns its sha256."""
    array = np.ascontiguousarray(array, dtype="<f8")
    blob = GRID_MAGIC + struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape) + array.tobytes()
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_grid(path: str | Path, expected_sha256: str | None = None) -> np.ndarray:
    blob = Path(path).read_bytes()
    if expected_sha256 is not None and hashlib.sha256(blob).hexdigest() != expected_sha256:
        raise DatasetIntegrityError(f"checksum mismatch for {path}")
    if blob[:8] != GRID_MAGIC:
        raise DatasetIntegrityError(f"{path}: bad magic")
    (ndim,) = struct.unpack_from("<I", blob, 8)
    shape = struct.unpack_from(f"<{ndim}I", blob, 12)
    offset = 12 + 4 * ndim
    return np.frombuffer(blob, dtype="<f8", offset=offset).reshape(shape).astype(np.float64)


def _pair_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def make_pairs(n: int, task: str, seed: int, size: int = 32, channels: int = 1,
               severity_range: tuple[float, float] = (0.3, 1.0),
               base_images: Callable[[np.random.Generator], np.ndarray] | None = None,
               splits: tuple[float, float, float] = (0.7, 0.15, 0.15)) -> list[RestorationPair]:
    """Generate ``n`` pairs in memory; every pair has its own derived seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = severity_range
    if not 0 < lo <= hi <= 1:
        raise ValueError("severity_range must satisfy 0 < lo <= hi <= 1")
    n_train = int(round(splits[0] * n))
    n_val = int(round(splits[1] * n))
    gen = base_images or (lambda r: procedural_image(r, size, channels))
    pairs = []
    for i in range(n):
        rng = _pair_seed(seed, i)
        gt = gen(rng)
        sev = float(rng.uniform(lo, hi))
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        pairs.append(RestorationPair(gt, degrade(gt, task, sev, rng), task, sev, f"{task}-{i:05d}", split))
    return pairs


def make_dataset(root: str | Path, n: int, task: str, seed: int, **kwargs) -> Path:
    """Generate ``n`` pairs and persist them with a manifest."""
    root = Path(root)
    try:
        (root / "pairs").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    pairs = make_pairs(n, task, seed, **kwargs)
    entries = []
    for p in pairs:
        sha = write_grid(root / "pairs" / f"{p.id}.grid", np.stack([p.gt, p.degraded]))
        entries.append({"id": p.id, "severity": p.severity, "split": p.split, "sha256": sha,
                        "seed": [seed, int(p.id.rsplit("-", 1)[1])]})
    manifest = {"format": "restorl-dataset", "version": DATASET_FORMAT_VERSION, "task": task,
                "seed": seed, "count": n, "shape": list(pairs[0].gt.shape), "pairs": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


class Dataset:
    """Lazy, manifest-ordered view of a persisted dataset."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        try:
            manifest = json.loads((self.root / "manifest.json").read_text())
        except FileNotFoundError:
            raise
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise DatasetIntegrityError(f"corrupt manifest in {self.root}: {exc}") from exc
        if manifest.get("format") != "restorl-dataset" or manifest.get("version") != DATASET_FORMAT_VERSION:
            raise DatasetIntegrityError(f"incompatible manifest version {manifest.get('version')!r}")
        try:
            self.task = manifest["task"]
            self.entries = manifest["pairs"]
            if manifest["count"] != len(self.entries):
                raise DatasetIntegrityError("manifest count does not match its entries")
        except KeyError as exc:
            raise DatasetIntegrityError(f"manifest missing field {exc}") from exc
        self.manifest = manifest

    def __len__(self) -> int:
        return len(self.entries)

    def _load(self, entry: dict) -> RestorationPair:
        grid = read_grid(self.root / "pairs" / f"{entry['id']}.grid", entry["sha256"])
        return RestorationPair(grid[0], grid[1], self.task, entry["severity"], entry["id"], entry["split"])

    def __getitem__(self, i: int) -> RestorationPair:
        return self._load(self.entries[i])

    def __iter__(self) -> Iterator[RestorationPair]:
        for e in self.entries:
            yield self._load(e)

    def split(self, name: str) -> list[RestorationPair]:
        return [self._load(e) for e in self.entries if e["split"] == name]


def load_dataset(root: str | Path) -> Dataset:
    return Dataset(root)

