"""SFT, RL and control training loops plus held-out evaluation."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from restorl.bench import RestorationPair
from restorl.config import ExperimentConfig
from restorl.diffusion import DiffusionSchedule, sample_trajectories
from restorl.metrics import MetricsRecord, RunStore, empirical_ot_cost, frechet_proxy, psnr, ssim
from restorl.model import apply_update, frozen_copy, make_optimizer, per_sample_sft_loss
from restorl.rewards import RewardStats, ScorerConfig, ScorerParams, refresh_scorer, score_images
from restorl.rl import (
    IterationLog,
    collect_rollouts,
    compute_advantages,
    derive_seed,
    diff_sft_step,
    difficulty_weights,
    rl_update,
    stats_from_state,
    stats_to_state,
)

log = logging.getLogger(__name__)

# purpose tags for derive_seed
_BATCH, _ROLLOUT, _NOISE, _SFT, _REFRESH, _POOL = range(6)


@dataclass
class PairSet:
    """Stacked ground truths and conditions for a list of pairs."""

    gts: torch.Tensor
    conds: torch.Tensor
    ids: list[str]

    @classmethod
    def from_pairs(cls, pairs: Sequence[RestorationPair]) -> "PairSet":
        if not pairs:
            raise ValueError("no pairs")
        gts = torch.from_numpy(np.stack([p.gt for p in pairs])).to(torch.float64)
        conds = torch.from_numpy(np.stack([p.degraded for p in pairs])).to(torch.float64)
        return cls(gts, conds, [p.id for p in pairs])

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "PairSet":
        idx = list(idx)
        return PairSet(self.gts[idx], self.conds[idx], [self.ids[i] for i in idx])


def train_sft(model, data: PairSet, schedule: DiffusionSchedule, steps: int, batch_size: int,
              lr: float, seed: int, optimizer: str = "adam", log_every: int = 100, start: int = 0,
              opt: torch.optim.Optimizer | None = None, checkpoint_fn=None,
              checkpoint_every: int = 0) -> list[float]:
    """Plain noise-prediction training on random minibatches.

    Each step draws its minibatch and noise from seeds derived from ``(seed, step)``,
    so a run resumed at ``start`` with the saved optimizer continues exactly.
    """
    opt = opt or make_optimizer(model, optimizer, lr)
    losses = []
    for step in range(start, steps):
        rng = np.random.default_rng([seed, step, _SFT])
        idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
        gen = torch.Generator().manual_seed(derive_seed(seed, step, _SFT))
        loss = per_sample_sft_loss(model, data.gts[idx], data.conds[idx], schedule, gen).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        apply_update(model, opt)
        losses.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            log.info("sft step %d loss %.5f", step + 1, float(np.mean(losses[-log_every:])))
        if checkpoint_fn is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            checkpoint_fn(step + 1, opt, losses)
    return losses


@torch.no_grad()
def generate(model, data: PairSet, schedule: DiffusionSchedule, seed: int, use_refined: bool = True,
             num_steps: int | None = None, refine_iterations: int = 1) -> np.ndarray:
    """Clamped restorations for every condition in ``data``."""
    gen = torch.Generator().manual_seed(seed)
    trajs = sample_trajectories(model, data.conds, data.ids, schedule, gen, use_refined, num_steps,
                                refine_iterations)
    return torch.stack([tr.final_output for tr in trajs]).clamp(0.0, 1.0).numpy()


def evaluate_outputs(outputs: np.ndarray, gts: np.ndarray, scorer: ScorerParams | None = None) -> dict:
    out = {
        "psnr": float(np.mean([psnr(y, g) for y, g in zip(outputs, gts)])),
        "ssim": float(np.mean([ssim(y, g) for y, g in zip(outputs, gts)])),
        "frechet_proxy": frechet_proxy(list(outputs), list(gts)),
        "ot_cost": empirical_ot_cost(outputs, gts),
    }
    if scorer is not None:
        out["proxy_score"] = float(score_images(scorer, outputs).mean())
    return out


def evaluate_model(model, data: PairSet, schedule: DiffusionSchedule, seed: int,
                   scorer: ScorerParams | None = None, use_refined: bool = True,
                   num_steps: int | None = None, refine_iterations: int = 1) -> dict:
    outputs = generate(model, data, schedule, seed, use_refined, num_steps, refine_iterations)
    return evaluate_outputs(outputs, data.gts.numpy(), scorer)


class RLTrainer:
    """Outer RL loop state: model, optimizer, frozen policy, reward statistics.

    With ``cfg.rl.enabled`` false the same loop runs the difficulty-weighted
    SFT control: identical batches, inference passes and step counts, but the
    update is sum w_i L_diff,i only.
    """

    def __init__(self, cfg: ExperimentConfig, model, schedule: DiffusionSchedule, train: PairSet,
                 reward_fn=None, evalset: PairSet | None = None, eval_scorer: ScorerParams | None = None,
                 scorer: ScorerParams | None = None, store: RunStore | None = None):
        self.cfg, self.rc = cfg, cfg.rl
        self.model, self.schedule, self.train = model, schedule, train
        self.reward_fn, self.evalset, self.store = reward_fn, evalset, store
        self.scorer = scorer
        self.eval_scorer = copy.deepcopy(eval_scorer) if eval_scorer is not None else None
        if self.rc.enabled and reward_fn is None:
            raise ValueError("RL training needs a reward backend")
        self.optimizer = make_optimizer(model, self.rc.optimizer, self.rc.lr)
        mix = {"hybrid": self.rc.mix, "track_only": 1.0, "batch_only": 0.0}[self.rc.norm]
        self.stats = RewardStats(self.rc.decay, mix, self.rc.eps_var, self.rc.min_track_count)
        self.iteration = 0
        self.model_old = None
        self.batch_idx: list[int] = []
        self.weights: np.ndarray | None = None
        self.history: list[IterationLog] = []
        self.pool: list[int] = self._select_pool()

    def _select_pool(self) -> list[int]:
        """The ``pool_size`` training images the starting model restores worst."""
        n = self.rc.pool_size
        if n == 0 or n >= len(self.train):
            return list(range(len(self.train)))
        outputs = generate(self.model, self.train, self.schedule, derive_seed(self.cfg.seed, _POOL),
                           self.rc.refine, self.num_steps, self.rc.refine_iterations)
        err = np.linalg.norm((outputs - self.train.gts.numpy()).reshape(len(outputs), -1), axis=1)
        return sorted(int(i) for i in np.argsort(-err, kind="stable")[:n])

    @property
    def num_steps(self):
        return self.cfg.schedule.sampling_steps or None

    # -- one outer iteration
    def _draw_batch(self, it: int) -> None:
        rng = np.random.default_rng([self.cfg.seed, it, _BATCH])
        k = self.rc.rollouts_per_image
        n = min(self.rc.batch_size // k, len(self.pool))
        images = sorted(self.pool[int(i)] for i in rng.choice(len(self.pool), size=n, replace=False))
        self.batch_idx = [i for i in images for _ in range(k)]

    def step(self) -> IterationLog:
        it, rc, seed = self.iteration, self.rc, self.cfg.seed
        if it % rc.old_refresh == 0 or self.model_old is None:
            self.model_old = frozen_copy(self.model)
        fresh = it % rc.weight_cadence == 0 or not self.batch_idx
        if fresh:
            self._draw_batch(it)
        batch = self.train.subset(self.batch_idx)
        rollout_seed = derive_seed(seed, it, _ROLLOUT)
        if rc.enabled:
            trajs = collect_rollouts(self.model_old, batch.conds, batch.ids, batch.gts, self.schedule,
                                     self.reward_fn, rollout_seed, use_refined=rc.refine,
                                     refine_iterations=rc.refine_iterations,
                                     final_step_reward_only=rc.final_step_reward_only,
                                     num_steps=self.num_steps)
            outputs = torch.stack([tr.final_output for tr in trajs]).clamp(0, 1).numpy()
        else:
            trajs = None
            outputs = generate(self.model_old, batch, self.schedule, rollout_seed, rc.refine,
                               self.num_steps, rc.refine_iterations)
        if fresh or self.weights is None:
            self.weights = (np.ones(len(batch)) if rc.uniform_weights
                            else difficulty_weights(outputs, batch.gts.numpy()))
        steps = []
        if rc.enabled:
            rewards = torch.stack([tr.rewards for tr in trajs]).numpy()
            adv = compute_advantages(trajs, self.stats, rc.advantage_mode, rc.track_by)
            for epoch in range(rc.inner_epochs):
                gen = torch.Generator().manual_seed(derive_seed(seed, it, epoch, _NOISE))
                steps.append(rl_update(self.model, self.optimizer, trajs, adv, self.weights, batch.gts,
                                       batch.conds, self.schedule, gen, rc.clip_eps, rc.kl_weight,
                                       rc.max_grad_norm, rc.skip_floor_steps, rc.diff_reduction,
                                       rc.min_step_variance))
            mean_reward = float(rewards[:, -1].mean())
            mean_step = float(rewards.mean())
        else:
            for epoch in range(rc.inner_epochs):
                gen = torch.Generator().manual_seed(derive_seed(seed, it, epoch, _NOISE))
                steps.append(diff_sft_step(self.model, self.optimizer, batch.gts, batch.conds,
                                           self.schedule, gen, self.weights, rc.max_grad_norm,
                                           rc.diff_reduction))
            # the control has no reward signal; log the final-output reward if a backend exists
            if self.reward_fn is not None:
                mean_reward = float(np.mean(self.reward_fn(outputs, batch.gts.numpy())))
            else:
                mean_reward = float(-np.linalg.norm((outputs - batch.gts.numpy()).reshape(len(outputs), -1), axis=1).mean())
            mean_step = mean_reward
        self.iteration += 1
        if (rc.enabled and rc.iterative_scorer_refresh and self.scorer is not None
                and self.iteration % rc.refresh_every == 0):
            self._refresh_scorer(outputs, batch.gts.numpy())
        entry = IterationLog(self.iteration, mean_reward, mean_step, float(self.weights.mean()), steps)
        self.history.append(entry)
        return entry

    def _refresh_scorer(self, outputs: np.ndarray, gts: np.ndarray) -> None:
        replay = ScorerConfig(tasks=(self.cfg.data.task,), n_images=8, size=self.cfg.data.size,
                              channels=self.cfg.data.channels)
        refresh_scorer(self.scorer, outputs, gts, derive_seed(self.cfg.seed, self.iteration, _REFRESH),
                       self.rc.refresh_reference_rmse, replay=replay)

    def evaluate(self) -> dict:
        if self.evalset is None:
            return {}
        return evaluate_model(self.model, self.evalset, self.schedule, self.cfg.eval.seed, self.eval_scorer,
                              self.rc.refine, self.num_steps, self.rc.refine_iterations)

    def record(self, entry: IterationLog | None, metrics: dict) -> MetricsRecord:
        extra = {}
        if entry is not None:
            last = entry.steps[-1]
            extra = {"mean_step_reward": entry.mean_step_reward, "mean_weight": entry.mean_weight,
                     "loss_total": last.loss.total, "loss_diff": last.loss.diff_term,
                     "loss_rl": last.loss.rl_term, "loss_kl": last.loss.kl_term,
                     "grad_norm": last.grad_norm, "mean_ratio": last.mean_ratio,
                     "clip_fraction": last.clip_fraction}
        if "proxy_score" in metrics:
            extra["eval_proxy_score"] = metrics["proxy_score"]
        return MetricsRecord(
            iteration=self.iteration,
            psnr=metrics.get("psnr"), ssim=metrics.get("ssim"),
            frechet_proxy=metrics.get("frechet_proxy"), ot_cost=metrics.get("ot_cost"),
            mean_reward=entry.mean_reward if entry is not None else None,
            extra=extra,
        )

    def run(self, iterations: int | None = None, checkpoint_fn=None) -> list[MetricsRecord]:
        """Train to ``iterations`` total outer iterations, logging one record per iteration."""
        total = self.rc.iterations if iterations is None else iterations
        out = []
        if self.iteration == 0 and self.evalset is not None:
            rec = self.record(None, self.evaluate())
            self._log(rec)
            out.append(rec)
        while self.iteration < total:
            entry = self.step()
            do_eval = self.iteration % self.rc.eval_every == 0 or self.iteration == total
            rec = self.record(entry, self.evaluate() if do_eval else {})
            self._log(rec)
            out.append(rec)
            log.info("iteration %d reward %.4f", self.iteration, entry.mean_reward)
            if checkpoint_fn is not None and (self.iteration % self.rc.checkpoint_every == 0
                                              or self.iteration == total):
                checkpoint_fn(self)
        return out

    def _log(self, rec: MetricsRecord) -> None:
        if self.store is not None:
            self.store.append(rec)

    # -- resumable state
    def state(self) -> dict:
        st = {"iteration": self.iteration, "stats": stats_to_state(self.stats), "pool": list(self.pool),
              "batch_idx": list(self.batch_idx),
              "weights": None if self.weights is None else self.weights.tolist(),
              "model_old": None if self.model_old is None else self.model_old.state_dict()}
        if self.scorer is not None and self.rc.iterative_scorer_refresh:
            st["scorer"] = self.scorer.model.state_dict()
            st["scorer_metadata"] = dict(self.scorer.metadata)
        return st

    def load_state(self, st: dict, optimizer_state: dict | None) -> None:
        self.iteration = st["iteration"]
        stats_from_state(self.stats, st["stats"])
        self.batch_idx = list(st["batch_idx"])
        self.pool = list(st["pool"])
        self.weights = None if st["weights"] is None else np.asarray(st["weights"])
        if st.get("model_old") is not None:
            self.model_old = frozen_copy(self.model)
            self.model_old.load_state_dict(st["model_old"])
        if "scorer" in st and self.scorer is not None:
            self.scorer.model.load_state_dict(st["scorer"])
            self.scorer.metadata = st["scorer_metadata"]
        if optimizer_state is not None:
            self.optimizer.load_state_dict(optimizer_state)
