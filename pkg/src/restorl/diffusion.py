"""Pixel-space DDPM machinery: schedules, the Gaussian reverse-step policy and rollouts.

All density arithmetic is carried out in float64 regardless of the dtype the
denoiser runs in, so recorded log-probabilities can be re-evaluated exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

VARIANCE_FLOOR = 1e-6
TRAJECTORY_FORMAT_VERSION = 1


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise schedule with 1-based timesteps ``t = 1..T``.

    ``betas[t - 1]`` is beta_t. ``alpha_bar(0)`` is defined as 1.
    """

    betas: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1-D array")
        if not np.all(np.isfinite(betas)) or np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("every beta must lie in the open interval (0, 1)")
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> "DiffusionSchedule":
        return cls(np.asarray(betas, dtype=np.float64))

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def posterior_variances(self) -> np.ndarray:
        ab = self.alpha_bars
        ab_prev = np.concatenate([[1.0], ab[:-1]])
        return self.betas * (1.0 - ab_prev) / (1.0 - ab)

    def alpha_bar(self, t: int) -> float:
        if t < 0 or t > self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def posterior_coefficients(self, t: int, s: int) -> tuple[float, float, float]:
        """Coefficients of q(x_s | x_t, x_0) for ``0 <= s < t``.

        Returns ``(coef_x0, coef_xt, variance)`` with the variance *not* floored.
        With ``s = t - 1`` these are the usual DDPM posterior terms; larger gaps
        give the strided-sampling generalisation.
        """
        if not 0 <= s < t <= self.T:
            raise ValueError(f"need 0 <= s < t <= T, got s={s}, t={t}")
        ab_t = self.alpha_bar(t)
        ab_s = self.alpha_bar(s)
        alpha_ts = ab_t / ab_s
        beta_ts = 1.0 - alpha_ts
        coef_x0 = math.sqrt(ab_s) * beta_ts / (1.0 - ab_t)
        coef_xt = math.sqrt(alpha_ts) * (1.0 - ab_s) / (1.0 - ab_t)
        variance = beta_ts * (1.0 - ab_s) / (1.0 - ab_t)
        return coef_x0, coef_xt, max(variance, 0.0)

    def policy_variance(self, t: int, s: int) -> float:
        return max(self.posterior_coefficients(t, s)[2], VARIANCE_FLOOR)

    def digest(self) -> str:
        return hashlib.sha256(self.betas.tobytes()).hexdigest()[:16]


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                   kind: str = "linear") -> DiffusionSchedule:
    """Build a linear or cosine beta schedule.

    For ``kind="cosine"`` the betas follow the squared-cosine alpha-bar curve
    and are clipped into ``[beta_start, beta_end]``.
    """
    if isinstance(T, bool) or not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError("T must be a positive integer")
    for v in (beta_start, beta_end):
        if not math.isfinite(v):
            raise ValueError("beta bounds must be finite")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(int(T) + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], beta_start, beta_end)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule(betas, kind=kind)


def sampling_timesteps(schedule: DiffusionSchedule, num_steps: int | None = None) -> list[int]:
    """Descending timesteps visited by the sampler.

    The chain always starts at T; with two or more steps it ends at 1, a single
    step jumps straight from T to 0.
    """
    T = schedule.T
    if num_steps is None or num_steps >= T:
        return list(range(T, 0, -1))
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    ts = np.unique(np.round(np.linspace(T, 1, num_steps)).astype(int))[::-1]
    return [int(t) for t in ts]


@dataclass
class LatentState:
    values: torch.Tensor
    t: int

    def __post_init__(self):
        if not torch.isfinite(self.values).all():
            raise ValueError("latent state contains non-finite values")
        if self.t < 0:
            raise ValueError("timestep must be non-negative")


def _check_t(schedule: DiffusionSchedule, t: int, allow_zero: bool = False):
    lo = 0 if allow_zero else 1
    if not lo <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [{lo}, {schedule.T}]")


def forward_sample(x0: torch.Tensor, t: int, noise: torch.Tensor,
                   schedule: DiffusionSchedule) -> torch.Tensor:
    """Draw x_t from q(x_t | x_0) given explicit standard-normal ``noise``."""
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    _check_t(schedule, t)
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def forward_sample_batch(x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor,
                         schedule: DiffusionSchedule) -> torch.Tensor:
    """Per-sample timesteps version of :func:`forward_sample` (``t`` has shape ``(B,)``)."""
    if noise.shape != x0.shape:
        raise ValueError("noise and x0 shapes differ")
    if t.min() < 1 or t.max() > schedule.T:
        raise ValueError("timestep out of range")
    ab = torch.as_tensor(schedule.alpha_bars, dtype=x0.dtype)[t - 1]
    ab = ab.view(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


def _eps(model, x_t: torch.Tensor, cond: torch.Tensor, t: int) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    tt = torch.full((x_t.shape[0],), t, dtype=torch.long)
    return model(x_t.to(dtype), cond.to(dtype), tt).to(torch.float64)


def x0_from_eps(x_t: torch.Tensor, eps: torch.Tensor, t: int, schedule: DiffusionSchedule,
                clamp: bool = False) -> torch.Tensor:
    _check_t(schedule, t)
    ab = schedule.alpha_bar(t)
    x0 = (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    return x0.clamp(0.0, 1.0) if clamp else x0


def predict_x0(model, x_t: torch.Tensor, cond: torch.Tensor, t: int,
               schedule: DiffusionSchedule, clamp: bool = False) -> torch.Tensor:
    """Reconstruct x_0 from the model's noise estimate.

    ``clamp`` is for scoring and metrics only; densities always use the raw value.
    """
    if t == 0:
        raise ValueError("nothing to predict at t = 0")
    _check_t(schedule, t)
    return x0_from_eps(x_t.to(torch.float64), _eps(model, x_t, cond, t), t, schedule, clamp)


def posterior_mean(x0_hat: torch.Tensor, x_t: torch.Tensor, t: int, s: int,
                   schedule: DiffusionSchedule) -> torch.Tensor:
    c0, ct, _ = schedule.posterior_coefficients(t, s)
    return c0 * x0_hat + ct * x_t


def gaussian_log_prob(x: torch.Tensor, mean: torch.Tensor, variance: float) -> torch.Tensor:
    """Isotropic Gaussian log-density summed over every non-batch dimension."""
    d = x[0].numel()
    sq = ((x.to(torch.float64) - mean.to(torch.float64)) ** 2).flatten(1).sum(1)
    return -0.5 * sq / variance - 0.5 * d * math.log(2 * math.pi * variance)


def policy_mean(model, x_t: torch.Tensor, cond: torch.Tensor, t: int, s: int,
                schedule: DiffusionSchedule) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean of p_theta(x_s | x_t, c) and the x_0 estimate it was built from."""
    x_t = x_t.to(torch.float64)
    x0_hat = x0_from_eps(x_t, _eps(model, x_t, cond, t), t, schedule)
    return posterior_mean(x0_hat, x_t, t, s, schedule), x0_hat


@dataclass
class StepResult:
    action: torch.Tensor
    log_prob: torch.Tensor
    mean: torch.Tensor
    variance: float
    x0_hat: torch.Tensor


def _prev(t: int, s: int | None) -> int:
    s = t - 1 if s is None else s
    if not 0 <= s < t:
        raise ValueError(f"previous timestep {s} must satisfy 0 <= s < {t}")
    return s


def reverse_step(model, x_t: torch.Tensor, cond: torch.Tensor, t: int,
                 schedule: DiffusionSchedule, generator: torch.Generator,
                 s: int | None = None, noise: torch.Tensor | None = None) -> StepResult:
    """Sample x_s ~ N(mu_theta(x_t, t, c), sigma^2 I) and return its exact log-density.

    ``x_t`` carries a leading batch dimension; ``log_prob`` has shape ``(B,)``.
    """
    _check_t(schedule, t)
    s = _prev(t, s)
    variance = schedule.policy_variance(t, s)
    mean, x0_hat = policy_mean(model, x_t, cond, t, s, schedule)
    if noise is None:
        noise = torch.randn(mean.shape, generator=generator, dtype=torch.float64)
    action = mean + math.sqrt(variance) * noise
    return StepResult(action, gaussian_log_prob(action, mean, variance), mean, variance, x0_hat)


def refined_action(model, x_t: torch.Tensor, cond: torch.Tensor, t: int,
                   schedule: DiffusionSchedule, generator: torch.Generator,
                   s: int | None = None, iterations: int = 1) -> StepResult:
    """Reverse step followed by ``iterations`` extra denoiser passes on the drawn sample.

    Each pass re-estimates x_0 from the current sample at timestep ``s`` and
    rebuilds the posterior mean around it; the original noise draw is reused.
    The log-density is always taken under the unrefined policy p_theta(. | x_t, c).
    At ``s = 0`` the sample already is an x_0 estimate, so no refinement happens.
    """
    _check_t(schedule, t)
    s = _prev(t, s)
    variance = schedule.policy_variance(t, s)
    mean, x0_hat = policy_mean(model, x_t, cond, t, s, schedule)
    noise = torch.randn(mean.shape, generator=generator, dtype=torch.float64)
    sigma = math.sqrt(variance)
    action = mean + sigma * noise
    if s > 0:
        x_t64 = x_t.to(torch.float64)
        for _ in range(iterations):
            x0_ref = x0_from_eps(action, _eps(model, action, cond, s), s, schedule)
            action = posterior_mean(x0_ref, x_t64, t, s, schedule) + sigma * noise
    return StepResult(action, gaussian_log_prob(action, mean, variance), mean, variance, x0_hat)


@dataclass
class TrajectoryStep:
    state: LatentState
    condition_id: str
    action: LatentState
    log_prob: float
    reward: float
    x0_prediction: torch.Tensor


@dataclass
class Trajectory:
    """One reverse-chain rollout stored as stacked per-step arrays.

    ``states[k]`` is x_t at ``timesteps[k]``; ``actions[k]`` is the sample
    installed as the next state (at ``prev_timesteps[k]``); ``x0_predictions[k]``
    is the model's x_0 estimate given ``actions[k]``; ``means[k]`` is the
    sampling policy's mean, kept for the KL term.
    """

    condition_id: str
    condition: torch.Tensor
    timesteps: list[int]
    prev_timesteps: list[int]
    variances: list[float]
    states: torch.Tensor
    actions: torch.Tensor
    means: torch.Tensor
    log_probs: torch.Tensor
    x0_predictions: torch.Tensor
    rewards: torch.Tensor | None = None
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.timesteps)

    @property
    def final_output(self) -> torch.Tensor:
        return self.actions[-1]

    @property
    def steps(self) -> list[TrajectoryStep]:
        rewards = self.rewards if self.rewards is not None else torch.zeros(len(self))
        return [
            TrajectoryStep(
                state=LatentState(self.states[k], self.timesteps[k]),
                condition_id=self.condition_id,
                action=LatentState(self.actions[k], self.prev_timesteps[k]),
                log_prob=float(self.log_probs[k]),
                reward=float(rewards[k]),
                x0_prediction=self.x0_predictions[k],
            )
            for k in range(len(self))
        ]

    def save(self, path: str | Path) -> None:
        arrays = {
            "condition": self.condition.numpy(),
            "timesteps": np.asarray(self.timesteps, dtype=np.int64),
            "prev_timesteps": np.asarray(self.prev_timesteps, dtype=np.int64),
            "variances": np.asarray(self.variances, dtype=np.float64),
            "states": self.states.numpy(),
            "actions": self.actions.numpy(),
            "means": self.means.numpy(),
            "log_probs": self.log_probs.numpy(),
            "x0_predictions": self.x0_predictions.numpy(),
        }
        if self.rewards is not None:
            arrays["rewards"] = self.rewards.numpy()
        meta = dict(self.metadata, condition_id=self.condition_id,
                    format_version=TRAJECTORY_FORMAT_VERSION)
        arrays["metadata"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Trajectory":
        with np.load(path) as z:
            meta = json.loads(z["metadata"].tobytes().decode())
            if meta.get("format_version") != TRAJECTORY_FORMAT_VERSION:
                raise ValueError(f"unsupported trajectory format {meta.get('format_version')}")
            t = lambda k: torch.from_numpy(z[k].copy())
            return cls(
                condition_id=meta.pop("condition_id"),
                condition=t("condition"),
                timesteps=[int(v) for v in z["timesteps"]],
                prev_timesteps=[int(v) for v in z["prev_timesteps"]],
                variances=[float(v) for v in z["variances"]],
                states=t("states"),
                actions=t("actions"),
                means=t("means"),
                log_probs=t("log_probs"),
                x0_predictions=t("x0_predictions"),
                rewards=t("rewards") if "rewards" in z.files else None,
                metadata=meta,
            )


@torch.no_grad()
def sample_trajectories(model, conds: torch.Tensor, condition_ids: Sequence[str],
                        schedule: DiffusionSchedule, generator: torch.Generator,
                        use_refined: bool = True, num_steps: int | None = None,
                        refine_iterations: int = 1) -> list[Trajectory]:
    """Roll the reverse chain for a batch of conditions, one trajectory each.

    The chain starts from x_T ~ N(0, I) and installs each (possibly refined)
    action as the next state.
    """
    if conds.shape[0] != len(condition_ids):
        raise ValueError("one condition id per condition is required")
    conds = conds.to(torch.float64)
    ts = sampling_timesteps(schedule, num_steps)
    prevs = ts[1:] + [0]
    x = torch.randn(conds.shape, generator=generator, dtype=torch.float64)
    states, actions, means, log_probs, x0s, variances = [], [], [], [], [], []
    for k, (t, s) in enumerate(zip(ts, prevs)):
        if use_refined:
            out = refined_action(model, x, conds, t, schedule, generator, s, refine_iterations)
        else:
            out = reverse_step(model, x, conds, t, schedule, generator, s)
        states.append(x)
        actions.append(out.action)
        means.append(out.mean)
        log_probs.append(out.log_prob)
        variances.append(out.variance)
        if k > 0:
            # this step's first pass gives the x_0 estimate for the previous action
            x0s.append(out.x0_hat)
        x = out.action
    x0s.append(x)
    stack = lambda xs: torch.stack(xs, dim=1)  # (B, S, ...)
    S, A, M, L, X = stack(states), stack(actions), stack(means), stack(log_probs), stack(x0s)
    return [
        Trajectory(
            condition_id=str(cid), condition=conds[i], timesteps=list(ts), prev_timesteps=list(prevs),
            variances=list(variances), states=S[i], actions=A[i], means=M[i], log_probs=L[i],
            x0_predictions=X[i],
        )
        for i, cid in enumerate(condition_ids)
    ]


def sample_trajectory(model, cond: torch.Tensor, condition_id: str, schedule: DiffusionSchedule,
                      generator: torch.Generator, use_refined: bool = True,
                      num_steps: int | None = None) -> Trajectory:
    return sample_trajectories(model, cond.unsqueeze(0), [condition_id], schedule, generator,
                               use_refined, num_steps)[0]


def trajectory_log_probs(model, traj: Sequence[Trajectory], schedule: DiffusionSchedule) -> torch.Tensor:
    """Re-evaluate log p_theta(action_k | state_k, c) for every step; shape ``(B, S)``.

    Differentiable with respect to the model parameters.
    """
    conds = torch.stack([tr.condition for tr in traj])
    out = []
    for k, (t, s) in enumerate(zip(traj[0].timesteps, traj[0].prev_timesteps)):
        x_t = torch.stack([tr.states[k] for tr in traj])
        a = torch.stack([tr.actions[k] for tr in traj])
        mean, _ = policy_mean(model, x_t, conds, t, s, schedule)
        out.append(gaussian_log_prob(a, mean, schedule.policy_variance(t, s)))
    return torch.stack(out, dim=1)


@torch.no_grad()
def sample(model, conds: torch.Tensor, schedule: DiffusionSchedule, generator: torch.Generator,
           num_steps: int | None = None, use_refined: bool = False) -> torch.Tensor:
    """Plain ancestral sampling; returns clamped x_0 estimates."""
    conds = conds.to(torch.float64)
    ts = sampling_timesteps(schedule, num_steps)
    prevs = ts[1:] + [0]
    x = torch.randn(conds.shape, generator=generator, dtype=torch.float64)
    for t, s in zip(ts, prevs):
        step = refined_action if use_refined else reverse_step
        x = step(model, x, conds, t, schedule, generator, s).action
    return x.clamp(0.0, 1.0)
