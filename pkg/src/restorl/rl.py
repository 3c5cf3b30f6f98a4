"""Policy-gradient fine-tuning of the denoiser with difficulty-weighted SFT.

Rollouts are collected under a frozen copy of the model, every reverse step
is rewarded through the x_0 estimate it leads to, and the update combines a
clipped importance-weighted surrogate, a Gaussian KL penalty towards the
frozen policy and the noise-prediction loss, mixed per sample by how far the
sample's current output is from its ground truth.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from restorl.diffusion import (
    DiffusionSchedule,
    Trajectory,
    VARIANCE_FLOOR,
    gaussian_log_prob,
    policy_mean,
    sample_trajectories,
    trajectory_log_probs,
)
from restorl.model import apply_update, frozen_copy, model_digest, per_sample_sft_loss
from restorl.rewards import RewardServiceError, RewardStats

log = logging.getLogger(__name__)


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint64)[0] >> np.uint64(1))


# ---------------------------------------------------------------- rollouts

def collect_rollouts(model_old, conds: torch.Tensor, ids: Sequence[str], gts: torch.Tensor,
                     schedule: DiffusionSchedule, reward_fn: Callable, seed: int, *,
                     use_refined: bool = True, refine_iterations: int = 1,
                     final_step_reward_only: bool = False, num_steps: int | None = None) -> list[Trajectory]:
    """One rewarded trajectory per condition under the frozen policy.

    Step k is rewarded with ``reward_fn`` applied to the clamped x_0 estimate
    that follows its action. With ``final_step_reward_only`` every step but the
    last gets reward 0. ``seed`` fully determines the rollouts.
    """
    gen = torch.Generator().manual_seed(seed)
    trajs = sample_trajectories(model_old, conds, list(ids), schedule, gen, use_refined, num_steps,
                                refine_iterations)
    B, S = len(trajs), len(trajs[0])
    x0 = torch.stack([tr.x0_predictions for tr in trajs]).clamp(0.0, 1.0).numpy()
    g = gts.to(torch.float64).numpy()
    rewards = np.zeros((B, S))
    try:
        if final_step_reward_only:
            rewards[:, -1] = reward_fn(x0[:, -1], g)
        else:
            flat = reward_fn(x0.reshape(B * S, *x0.shape[2:]), np.repeat(g, S, axis=0))
            rewards[:] = np.asarray(flat, dtype=np.float64).reshape(B, S)
    except RewardServiceError as exc:
        raise RewardServiceError(f"reward backend failed on batch {list(ids)}: {exc}") from exc
    if not np.all(np.isfinite(rewards)):
        raise RewardServiceError(f"non-finite rewards for batch {list(ids)}")
    digest = model_digest(model_old)
    for i, tr in enumerate(trajs):
        tr.rewards = torch.from_numpy(rewards[i].copy())
        tr.metadata.update(rollout_seed=int(seed), schedule_digest=schedule.digest(), model_digest=digest,
                           use_refined=bool(use_refined),
                           refine_iterations=int(refine_iterations),
                           final_step_reward_only=bool(final_step_reward_only))
    return trajs


# ----------------------------------------------------------- ratio and objective

def importance_ratio(model, model_old, traj: Trajectory, k: int, schedule: DiffusionSchedule) -> float:
    """p_theta(a_k | x_k, c) / p_old(a_k | x_k, c) at the recorded action of step ``k``."""
    t, s = traj.timesteps[k], traj.prev_timesteps[k]
    var = schedule.policy_variance(t, s)
    x, c, a = traj.states[k][None], traj.condition[None], traj.actions[k][None]
    with torch.no_grad():
        lp = gaussian_log_prob(a, policy_mean(model, x, c, t, s, schedule)[0], var)
        lp_old = gaussian_log_prob(a, policy_mean(model_old, x, c, t, s, schedule)[0], var)
    diff = float(lp - lp_old)
    if not math.isfinite(diff):
        raise FloatingPointError(f"non-finite log-density at step {k} of {traj.condition_id}")
    return math.exp(diff)


def ratios(model, trajs: Sequence[Trajectory], schedule: DiffusionSchedule,
           step_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Differentiable importance ratios against the log-densities stored at collection; ``(B, S)``.

    Steps outside ``step_mask`` get ratio 1 with zero gradient. The mask is applied
    to the log-ratio, since floor-variance steps can move by hundreds of nats and
    overflow exp() or its gradient.
    """
    logp = trajectory_log_probs(model, trajs, schedule)
    old = torch.stack([tr.log_probs for tr in trajs])
    diff = logp - old
    if step_mask is not None:
        diff = torch.where(step_mask.to(torch.bool), diff, torch.zeros_like(diff))
    out = torch.exp(diff)
    if not torch.isfinite(out).all():
        raise FloatingPointError("non-finite importance ratio")
    return out


def clip_bound(advantages: torch.Tensor, clip_eps: float) -> torch.Tensor:
    """g(eps, A): (1 + eps) A for A >= 0, else (1 - eps) A."""
    return torch.where(advantages >= 0, (1 + clip_eps) * advantages, (1 - clip_eps) * advantages)


def clipped_surrogate(ratio: torch.Tensor, advantages: torch.Tensor, clip_eps: float) -> torch.Tensor:
    """Elementwise min(w A, g(eps, A)); gradients flow through ``ratio`` only."""
    if ratio.shape != advantages.shape:
        raise ValueError(f"ratios {tuple(ratio.shape)} and advantages {tuple(advantages.shape)} are misaligned")
    if not 0 < clip_eps < 1:
        raise ValueError("clip_eps must lie in (0, 1)")
    adv = advantages.detach().to(ratio.dtype)
    return torch.minimum(ratio * adv, clip_bound(adv, clip_eps))


def clipped_objective(ratio: torch.Tensor, advantages: torch.Tensor, clip_eps: float,
                      step_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Per-trajectory J_i summed over timesteps; ``(B, S) -> (B,)``. The scalar objective is its mean.

    ``step_mask`` (length S) drops timesteps from the sum.
    """
    terms = clipped_surrogate(ratio, advantages, clip_eps)
    if step_mask is not None:
        terms = torch.where(step_mask.to(torch.bool), terms, torch.zeros_like(terms))
    return terms.sum(-1)


def floor_step_mask(trajs: Sequence[Trajectory], min_variance: float = VARIANCE_FLOOR) -> torch.Tensor:
    """False for steps whose policy variance is at most ``min_variance``.

    With the default that is only the noise-free last step. Such actions are a
    sigma-scale jitter around the mean: they barely change the reward, yet their
    score-function gradient is ~1/sigma times larger than any other step's, and
    one optimizer step can move their log-ratio by tens of nats.
    """
    return torch.tensor([v > min_variance for v in trajs[0].variances])


def gaussian_kl(mean: torch.Tensor, mean_old: torch.Tensor, variance: float) -> torch.Tensor:
    """KL between isotropic Gaussians with shared variance, summed over non-batch dims."""
    if variance < VARIANCE_FLOOR:
        raise ValueError(f"variance {variance} below floor {VARIANCE_FLOOR}")
    return ((mean - mean_old.to(mean.dtype)) ** 2).flatten(1).sum(1) / (2 * variance)


def kl_penalty(model, trajs: Sequence[Trajectory], schedule: DiffusionSchedule, weight: float,
               model_old=None) -> torch.Tensor:
    """Weighted KL(p_theta || p_old) averaged over steps and trajectories.

    The frozen policy's means are the ones stored at collection time unless
    ``model_old`` is given, in which case they are recomputed.
    """
    if weight == 0:
        return torch.zeros((), dtype=torch.float64)
    conds = torch.stack([tr.condition for tr in trajs])
    terms = []
    for k, (t, s) in enumerate(zip(trajs[0].timesteps, trajs[0].prev_timesteps)):
        x = torch.stack([tr.states[k] for tr in trajs])
        mean, _ = policy_mean(model, x, conds, t, s, schedule)
        if model_old is None:
            mean_old = torch.stack([tr.means[k] for tr in trajs])
        else:
            with torch.no_grad():
                mean_old, _ = policy_mean(model_old, x, conds, t, s, schedule)
        terms.append(gaussian_kl(mean, mean_old, schedule.policy_variance(t, s)))
    return weight * torch.stack(terms, 1).mean()


# ------------------------------------------------------------ weights and loss

def difficulty_weights(outputs, gts) -> np.ndarray:
    """w_i = ||y_i - g_i|| / max_j ||y_j - g_j||; an all-perfect batch gets all zeros."""
    outputs, gts = np.asarray(outputs, dtype=np.float64), np.asarray(gts, dtype=np.float64)
    if outputs.shape != gts.shape:
        raise ValueError(f"shape mismatch {outputs.shape} vs {gts.shape}")
    if len(outputs) == 0:
        raise ValueError("empty batch")
    err = np.linalg.norm((outputs - gts).reshape(len(outputs), -1), axis=1)
    top = err.max()
    return err / top if top > 0 else np.zeros_like(err)


@dataclass
class LossBreakdown:
    diff_term: float
    rl_term: float
    kl_term: float
    total: float


def combined_loss(l_diff: torch.Tensor, j: torch.Tensor, kl: torch.Tensor,
                  weights) -> tuple[torch.Tensor, LossBreakdown]:
    """Minimisation target sum (1 - w_i) L_diff,i - sum w_i J_i + L_KL.

    Returns the differentiable total and its float breakdown.
    """
    w = torch.as_tensor(np.asarray(weights, dtype=np.float64))
    if not (l_diff.shape == j.shape == w.shape):
        raise ValueError(f"misaligned per-sample terms: L_diff {tuple(l_diff.shape)}, "
                         f"J {tuple(j.shape)}, weights {tuple(w.shape)}")
    diff = ((1 - w).to(l_diff.dtype) * l_diff).sum()
    rl = -(w.to(j.dtype) * j).sum()
    total = diff.to(torch.float64) + rl.to(torch.float64) + kl.to(torch.float64)
    parts = LossBreakdown(diff.item(), rl.item(), kl.item(), 0.0)
    parts.total = parts.diff_term + parts.rl_term + parts.kl_term
    return total, parts


def per_sample_diff_loss(model, gts: torch.Tensor, conds: torch.Tensor, schedule: DiffusionSchedule,
                         generator: torch.Generator, reduction: str = "sum") -> torch.Tensor:
    """L_diff,i for the combined loss, in float64.

    ``sum`` is the squared error norm, which lives on the same per-element-summed
    scale as the policy log-density; ``mean`` is the per-element MSE of SFT.
    """
    l = per_sample_sft_loss(model, gts, conds, schedule, generator).to(torch.float64)
    if reduction == "sum":
        return l * gts[0].numel()
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    return l


def diff_sft_loss(model, gts: torch.Tensor, conds: torch.Tensor, schedule: DiffusionSchedule,
                  generator: torch.Generator, weights, reduction: str = "sum") -> torch.Tensor:
    """Difficulty-weighted SFT control: sum w_i L_diff,i."""
    w = torch.as_tensor(np.asarray(weights, dtype=np.float64))
    return (w * per_sample_diff_loss(model, gts, conds, schedule, generator, reduction)).sum()


# ------------------------------------------------------------------ advantages

def _key(cid: str, k: int, track_by: str):
    return (cid, k) if track_by == "image_step" else cid


def compute_advantages(trajs: Sequence[Trajectory], stats: RewardStats, mode: str = "step",
                       track_by: str = "image_step") -> np.ndarray:
    """Update ``stats`` with the batch rewards and return normalised advantages ``(B, S)``.

    ``step`` mode normalises each step's reward against that step's batch and
    track; ``trajectory`` mode scores the summed trajectory reward once and
    broadcasts it to every step.
    """
    R = torch.stack([tr.rewards for tr in trajs]).numpy().astype(np.float64)
    B, S = R.shape
    adv = np.zeros((B, S))
    if mode == "trajectory":
        total = R.sum(1)
        stats.set_batch(total)
        for i, tr in enumerate(trajs):
            stats.update(tr.condition_id, [total[i]])
        for i, tr in enumerate(trajs):
            adv[i, :] = stats.advantage(total[i], tr.condition_id)
        return adv
    if mode != "step":
        raise ValueError(f"unknown advantage mode {mode!r}")
    for k in range(S):
        stats.set_batch(R[:, k])
        for i, tr in enumerate(trajs):
            stats.update(_key(tr.condition_id, k, track_by), [R[i, k]])
        for i, tr in enumerate(trajs):
            adv[i, k] = stats.advantage(R[i, k], _key(tr.condition_id, k, track_by))
    return adv


def stats_to_state(stats: RewardStats) -> list:
    out = []
    for key, e in stats.track.items():
        out.append([list(key) if isinstance(key, tuple) else key, e.mean, e.var, e.count])
    return out


def stats_from_state(stats: RewardStats, state: list) -> RewardStats:
    from restorl.rewards import TrackEntry

    for key, mean, var, count in state:
        stats.track[tuple(key) if isinstance(key, list) else key] = TrackEntry(mean, var, count)
    return stats


# ------------------------------------------------------------------ update steps

@dataclass
class StepInfo:
    loss: LossBreakdown
    grad_norm: float
    mean_ratio: float = 1.0
    clip_fraction: float = 0.0


def rl_update(model, optimizer, trajs: Sequence[Trajectory], advantages: np.ndarray, weights,
              gts: torch.Tensor, conds: torch.Tensor, schedule: DiffusionSchedule, generator: torch.Generator,
              clip_eps: float, kl_weight: float, max_grad_norm: float | None,
              skip_floor_steps: bool = True, reduction: str = "sum",
              min_step_variance: float = VARIANCE_FLOOR) -> StepInfo:
    """One gradient step on the combined loss over the whole rollout batch."""
    mask = floor_step_mask(trajs, min_step_variance) if skip_floor_steps else None
    r = ratios(model, trajs, schedule, mask)
    adv = torch.as_tensor(advantages, dtype=torch.float64)
    j = clipped_objective(r, adv, clip_eps, mask)
    kl = kl_penalty(model, trajs, schedule, kl_weight)
    l_diff = per_sample_diff_loss(model, gts, conds, schedule, generator, reduction)
    total, parts = combined_loss(l_diff, j, kl, weights)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    norm = apply_update(model, optimizer, max_grad_norm)
    with torch.no_grad():
        clipped = (r * adv > clip_bound(adv, clip_eps)).to(torch.float64).mean()
    return StepInfo(parts, norm, r.mean().item(), clipped.item())


def diff_sft_step(model, optimizer, gts: torch.Tensor, conds: torch.Tensor, schedule: DiffusionSchedule,
                  generator: torch.Generator, weights, max_grad_norm: float | None,
                  reduction: str = "sum") -> StepInfo:
    """One gradient step of the difficulty-weighted SFT control."""
    loss = diff_sft_loss(model, gts, conds, schedule, generator, weights, reduction)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    norm = apply_update(model, optimizer, max_grad_norm)
    v = loss.item()
    return StepInfo(LossBreakdown(v, 0.0, 0.0, v), norm)


@dataclass
class IterationLog:
    iteration: int
    mean_reward: float
    mean_step_reward: float
    mean_weight: float
    steps: list = field(default_factory=list)
