"""Stage commands behind the CLI: data, SFT, scorer, RL, evaluation and ablation sweeps.

A run directory holds everything a stage produced plus the resolved config
and code version that produced it::

    <out>/config.json        resolved config of the last stage run here
    <out>/run.json           code version, seed and config digest per stage
    <out>/data/              dataset (unless paths.data_dir points elsewhere)
    <out>/sft.ckpt           denoiser after SFT (partial while training)
    <out>/sft_metrics.jsonl
    <out>/scorer.pt          proxy quality scorer, scorer_eval.json
    <out>/rl.ckpt            RL (or control) checkpoint with trainer state
    <out>/metrics.jsonl      one record per outer iteration
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
import re
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

import restorl
from restorl.bench import load_dataset, folder_images, make_dataset
from restorl.config import ConfigError, ExperimentConfig, from_dict, parse_override, _merge
from restorl.diffusion import DiffusionSchedule, build_schedule
from restorl.external import EndpointConfig, ExternalReward
from restorl.metrics import MetricsRecord, RunStore
from restorl.model import ArchConfig, Checkpoint, init_model, make_optimizer
from restorl.rewards import (
    ProxyReward,
    ReconstructionReward,
    RewardServiceError,
    ScorerConfig,
    ScorerParams,
    evaluate_scorer,
    train_quality_scorer,
)
from restorl.training import PairSet, RLTrainer, evaluate_model, train_sft

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_RUNTIME = 0, 2, 3, 4
LOCK_NAME = ".restorl.lock"

# name -> (table label, overrides)
VARIANTS = {
    "with_rec": ("with Rec.", ["rl.reward=reconstruction"]),
    "wo_wi": ("w/o w_i", ["rl.uniform_weights=true"]),
    "with_xt1": ("with x_{t-1}", ["rl.refine=false"]),
    "reward_x0": ("Reward x_0", ["rl.final_step_reward_only=true", "rl.advantage_mode=trajectory"]),
    "norm_track": ("Norm. from track", ["rl.norm=track_only"]),
    "iter_rl": ("with Iter. RL", ["rl.iterative_scorer_refresh=true"]),
}


class DependencyError(RuntimeError):
    """A required upstream artifact is missing or incomplete."""


class LockError(RuntimeError):
    pass


# ------------------------------------------------------------------ run directory

def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    root = Path(restorl.__file__).parent
    for f in sorted(root.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return f"{restorl.__version__}+{h.hexdigest()[:12]}"


@contextmanager
def run_lock(out: str | Path):
    """Exclusive writer lock on a run directory."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out} is locked by another writer (remove {path} if it is stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        path.unlink(missing_ok=True)


def record_run(cfg: ExperimentConfig, stage: str) -> None:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    text = cfg.dumps()
    (out / "config.json").write_text(text + "\n")
    info_path = out / "run.json"
    info = json.loads(info_path.read_text()) if info_path.exists() else {}
    info["code_version"] = code_version()
    info.setdefault("stages", {})[stage] = {
        "seed": cfg.seed, "config_sha256": hashlib.sha256(text.encode()).hexdigest()}
    info_path.write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")


def truncate_log(store: RunStore, upto: int) -> None:
    """Drop records past iteration ``upto`` (used when resuming from a checkpoint)."""
    keep = [r for r in store.records() if r.iteration <= upto]
    store.path.unlink(missing_ok=True)
    store.init()
    for r in keep:
        store.append(r)


# ------------------------------------------------------------------ shared builders

def schedule_for(cfg: ExperimentConfig) -> DiffusionSchedule:
    s = cfg.schedule
    return build_schedule(s.T, s.beta_start, s.beta_end, s.kind)


def arch_for(cfg: ExperimentConfig) -> ArchConfig:
    m = cfg.model
    return ArchConfig(cfg.data.channels, m.width, m.depth, m.emb_dim, m.dtype)


def scorer_config(cfg: ExperimentConfig) -> ScorerConfig:
    s = cfg.scorer
    return ScorerConfig(tuple(s.tasks), s.n_images, s.n_heldout, tuple(s.severities), cfg.data.size,
                        cfg.data.channels, s.width, s.epochs, s.batch_size, s.lr)


def load_splits(cfg: ExperimentConfig) -> dict[str, list]:
    root = cfg.data_dir()
    if not (root / "manifest.json").exists():
        raise DependencyError(f"no dataset at {root}; run `restorl make-data` first")
    ds = load_dataset(root)
    if ds.task != cfg.data.task:
        raise DependencyError(f"dataset at {root} is for task {ds.task!r}, config asks for {cfg.data.task!r}")
    return {name: ds.split(name) for name in ("train", "val", "test")}


def eval_set(cfg: ExperimentConfig, splits: dict) -> PairSet:
    pairs = splits[cfg.eval.split][: cfg.eval.max_images]
    if not pairs:
        raise DependencyError(f"dataset split {cfg.eval.split!r} is empty")
    return PairSet.from_pairs(pairs)


def load_sft(cfg: ExperimentConfig, schedule: DiffusionSchedule) -> Checkpoint:
    path = cfg.sft_checkpoint()
    if not path.exists():
        raise DependencyError(f"SFT checkpoint {path} not found; run `restorl train-sft` first")
    ck = Checkpoint.load(path)
    if ck.step < cfg.sft.steps:
        raise DependencyError(f"SFT checkpoint {path} is incomplete (step {ck.step} of {cfg.sft.steps}); "
                              "rerun `restorl train-sft --resume`")
    if ck.schedule_digest != schedule.digest():
        raise DependencyError(f"SFT checkpoint {path} was trained with a different noise schedule")
    return ck


def load_scorer(cfg: ExperimentConfig) -> ScorerParams:
    path = cfg.scorer_checkpoint()
    if not path.exists():
        raise DependencyError(f"proxy scorer {path} not found; run `restorl train-scorer` first")
    return ScorerParams.load(path)


def make_reward(cfg: ExperimentConfig, scorer: ScorerParams | None):
    kind = cfg.rl.reward
    if kind == "proxy":
        if scorer is None:
            raise DependencyError("the proxy reward needs a trained scorer")
        return ProxyReward(scorer)
    if kind == "reconstruction":
        return ReconstructionReward()
    e = cfg.external
    try:
        endpoint = (EndpointConfig.from_string(e.endpoint, timeout=e.timeout, max_in_flight=e.max_in_flight)
                    if e.endpoint else EndpointConfig.from_env(timeout=e.timeout, max_in_flight=e.max_in_flight))
    except (RewardServiceError, ValueError) as exc:
        raise DependencyError(f"external reward backend unavailable: {exc}") from exc
    return ExternalReward(endpoint)


# ------------------------------------------------------------------ stages

def cmd_make_data(cfg: ExperimentConfig) -> Path:
    d = cfg.data
    kwargs = dict(size=d.size, channels=d.channels, severity_range=(d.severity_min, d.severity_max),
                  splits=tuple(d.splits))
    if d.image_folder:
        kwargs["base_images"] = folder_images(d.image_folder, d.size, d.channels)
    root = make_dataset(cfg.data_dir(), d.n, d.task, cfg.seed, **kwargs)
    record_run(cfg, "make-data")
    log.info("wrote %d pairs to %s", d.n, root)
    return root


def cmd_train_sft(cfg: ExperimentConfig, resume: bool = False) -> Checkpoint:
    splits = load_splits(cfg)
    schedule = schedule_for(cfg)
    train = PairSet.from_pairs(splits["train"])
    path = cfg.sft_checkpoint()
    store = RunStore(cfg.out / "sft_metrics.jsonl")
    sc = cfg.sft
    model = init_model(arch_for(cfg), cfg.seed)
    opt = make_optimizer(model, sc.optimizer, sc.lr)
    start = 0
    if resume and path.exists():
        ck = Checkpoint.load(path)
        model = ck.model
        opt = make_optimizer(model, sc.optimizer, sc.lr)
        if ck.optimizer_state is not None:
            opt.load_state_dict(ck.optimizer_state)
        start = ck.step
        truncate_log(store, start)
        log.info("resuming SFT at step %d", start)
    else:
        store.path.unlink(missing_ok=True)
    store.init()
    record_run(cfg, "train-sft")

    def save(step, optimizer, losses):
        if sc.log_every:
            store.append(MetricsRecord(iteration=step, extra={"sft_loss": float(np.mean(losses[-sc.log_every:]))}))
        Checkpoint(model, optimizer.state_dict(), schedule.digest(), step, None, cfg.to_dict()).save(path)

    if start < sc.steps:
        train_sft(model, train, schedule, sc.steps, sc.batch_size, sc.lr, cfg.seed, sc.optimizer,
                  sc.log_every, start=start, opt=opt, checkpoint_fn=save,
                  checkpoint_every=sc.log_every or sc.steps)
        if sc.log_every == 0 or sc.steps % sc.log_every:
            Checkpoint(model, opt.state_dict(), schedule.digest(), sc.steps, None, cfg.to_dict()).save(path)
    return Checkpoint.load(path)


def cmd_train_scorer(cfg: ExperimentConfig) -> dict:
    scfg = scorer_config(cfg)
    scorer = train_quality_scorer(scfg, cfg.seed)
    report = evaluate_scorer(scorer, scfg, cfg.seed)
    scorer.metadata["heldout"] = report
    path = cfg.scorer_checkpoint()
    path.parent.mkdir(parents=True, exist_ok=True)
    scorer.save(path)
    (cfg.out / "scorer_eval.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    record_run(cfg, "train-scorer")
    return report


@dataclass
class RLResult:
    records: list[MetricsRecord]
    trainer: RLTrainer


def cmd_train_rl(cfg: ExperimentConfig, resume: bool = False) -> RLResult:
    """RL stage (or the weighted-SFT control when ``rl.enabled`` is false)."""
    schedule = schedule_for(cfg)
    ck = load_sft(cfg, schedule)
    splits = load_splits(cfg)
    need_scorer = cfg.rl.reward == "proxy" or cfg.rl.iterative_scorer_refresh
    scorer = load_scorer(cfg) if need_scorer or cfg.scorer_checkpoint().exists() else None
    eval_scorer = load_scorer(cfg) if scorer is not None else None
    reward_fn = make_reward(cfg, scorer) if cfg.rl.enabled else (ProxyReward(eval_scorer) if eval_scorer else None)

    store = RunStore(cfg.out / "metrics.jsonl")
    ck_path = cfg.out / "rl.ckpt"
    model = ck.model
    resumed = None
    if resume and ck_path.exists():
        resumed = Checkpoint.load(ck_path)
        model = resumed.model
    trainer = RLTrainer(cfg, model, schedule, PairSet.from_pairs(splits["train"]), reward_fn,
                        eval_set(cfg, splits), eval_scorer, scorer, store)
    if resumed is not None:
        trainer.load_state(resumed.extra["trainer"], resumed.optimizer_state)
        truncate_log(store, trainer.iteration)
        log.info("resuming RL at iteration %d", trainer.iteration)
    else:
        store.path.unlink(missing_ok=True)
    store.init()
    record_run(cfg, "train-rl")

    def save(tr: RLTrainer):
        Checkpoint(tr.model, tr.optimizer.state_dict(), schedule.digest(), tr.iteration, None,
                   cfg.to_dict(), {"trainer": tr.state()}).save(ck_path)

    trainer.run(checkpoint_fn=save)
    return RLResult(store.records(), trainer)


def cmd_evaluate(cfg: ExperimentConfig, checkpoint: str | Path | None = None) -> dict:
    """Held-out metrics for ``checkpoint`` (default: the RL checkpoint, else the SFT one)."""
    schedule = schedule_for(cfg)
    if checkpoint is None:
        rl_path = cfg.out / "rl.ckpt"
        checkpoint = rl_path if rl_path.exists() else cfg.sft_checkpoint()
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise DependencyError(f"checkpoint {checkpoint} not found; train a model first")
    model = Checkpoint.load(checkpoint).model
    splits = load_splits(cfg)
    scorer = load_scorer(cfg) if cfg.scorer_checkpoint().exists() else None
    rc = cfg.rl
    metrics = evaluate_model(model, eval_set(cfg, splits), schedule, cfg.eval.seed, scorer, rc.refine,
                             cfg.schedule.sampling_steps or None, rc.refine_iterations)
    metrics["checkpoint"] = str(checkpoint)
    (cfg.out / "eval.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    record_run(cfg, "evaluate")
    return metrics


# ------------------------------------------------------------------ ablation

def parse_grid(specs: list[str]) -> list[list[str]]:
    """``["rl.clip_eps=0.1,0.2", "rl.mix=0,1"]`` -> the cartesian list of override lists."""
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"grid axis {spec!r} is not of the form key=v1,v2,...")
        key, values = spec.split("=", 1)
        vals = [v for v in values.split(",") if v != ""]
        if not vals:
            raise ConfigError(f"grid axis {key!r} has no values")
        axes.append([f"{key}={v}" for v in vals])
    return [list(combo) for combo in itertools.product(*axes)]


def _run_name(overrides: list[str]) -> str:
    return "__".join(re.sub(r"[^A-Za-z0-9_.=+-]", "_", o) for o in overrides) or "default"


def derived_config(base: ExperimentConfig, out: Path, overrides: list[str]) -> ExperimentConfig:
    """``base`` with ``overrides`` applied, writing to ``out`` but sharing base artifacts."""
    data = base.to_dict()
    for o in overrides:
        data = _merge(data, parse_override(o))
    data["output_dir"] = str(out)
    data["paths"] = {"data_dir": str(base.data_dir()), "sft_checkpoint": str(base.sft_checkpoint()),
                     "scorer_checkpoint": str(base.scorer_checkpoint())}
    return from_dict(data)


def reward_curve(records: list[MetricsRecord]) -> np.ndarray:
    return np.array([r.mean_reward for r in records if r.mean_reward is not None], dtype=np.float64)


def first_difference_variance(curve) -> float:
    curve = np.asarray(curve, dtype=np.float64)
    return float(np.var(np.diff(curve))) if len(curve) > 2 else 0.0


def _final_metrics(records: list[MetricsRecord]) -> dict:
    evals = [r for r in records if r.psnr is not None]
    if not evals:
        return {}
    last = evals[-1]
    return {"psnr": last.psnr, "ssim": last.ssim, "frechet_proxy": last.frechet_proxy,
            "ot_cost": last.ot_cost, "proxy_score": last.extra.get("eval_proxy_score")}


def ensure_base_artifacts(cfg: ExperimentConfig, resume: bool = False) -> None:
    """Create the dataset, SFT checkpoint and scorer shared by every ablation run, if missing."""
    if not (cfg.data_dir() / "manifest.json").exists():
        cmd_make_data(cfg)
    schedule = schedule_for(cfg)
    try:
        load_sft(cfg, schedule)
    except DependencyError:
        cmd_train_sft(cfg, resume=resume)
    if not cfg.scorer_checkpoint().exists():
        cmd_train_scorer(cfg)


def _run_complete(cfg: ExperimentConfig) -> bool:
    recs = RunStore(cfg.out / "metrics.jsonl").records() if (cfg.out / "metrics.jsonl").exists() else []
    return bool(recs) and recs[-1].iteration >= cfg.rl.iterations and recs[-1].psnr is not None


def cmd_ablate(cfg: ExperimentConfig, variants: list[str] | None = None, grid: list[str] | None = None,
               resume: bool = False) -> list[dict]:
    """Run the comparison rows and write ``ablation.txt`` / ``ablation.tsv`` under the run directory.

    Without ``grid`` the rows are baseline (the SFT model), +Diff.SFT (the
    weighted-SFT control), +RL (the configured RL run) and each requested
    variant. With ``grid`` every cartesian combination becomes one run.
    """
    ensure_base_artifacts(cfg, resume)
    base_out = cfg.out
    runs: list[tuple[str, str, list[str]]] = []
    if grid:
        for combo in parse_grid(grid):
            runs.append((_run_name(combo), _run_name(combo), combo))
    else:
        runs.append(("diff_sft", "+Diff.SFT", ["rl.enabled=false"]))
        runs.append(("rl", "+RL", []))
        for name in (VARIANTS if variants is None else variants):
            if name not in VARIANTS:
                raise ConfigError(f"unknown ablation variant {name!r}; choose from {sorted(VARIANTS)}")
            label, ovs = VARIANTS[name]
            runs.append((name, label, ovs))

    rows = []
    baseline = cmd_evaluate(derived_config(cfg, base_out, []), cfg.sft_checkpoint())
    rows.append({"name": "baseline", "label": "baseline", **{k: baseline.get(k) for k in
                 ("psnr", "ssim", "frechet_proxy", "ot_cost", "proxy_score")},
                 "final_reward": None, "reward_diff_var": None})
    for name, label, ovs in runs:
        sub = derived_config(cfg, base_out / "runs" / name, ovs)
        with run_lock(sub.out):
            if resume and _run_complete(sub):
                records = RunStore(sub.out / "metrics.jsonl").records()
            else:
                records = cmd_train_rl(sub, resume=resume).records
        curve = reward_curve(records)
        rows.append({"name": name, "label": label, **_final_metrics(records),
                     "final_reward": float(curve[-1]) if len(curve) else None,
                     "reward_diff_var": first_difference_variance(curve)})
    write_table(rows, base_out / "ablation")
    if not grid:
        by = {r["name"]: r for r in rows}
        if "with_rec" in by and "rl" in by:
            note = {"iqa_reward_diff_var": by["rl"]["reward_diff_var"],
                    "reconstruction_reward_diff_var": by["with_rec"]["reward_diff_var"]}
            note["reconstruction_rougher"] = note["reconstruction_reward_diff_var"] > note["iqa_reward_diff_var"]
            (base_out / "ablation_instability.json").write_text(json.dumps(note, indent=1, sort_keys=True) + "\n")
    return rows


TABLE_COLUMNS = ("label", "psnr", "ssim", "frechet_proxy", "ot_cost", "proxy_score", "final_reward",
                 "reward_diff_var")


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4g}" if abs(v) < 1e-3 and v != 0 else f"{v:.4f}"
    return str(v)


def format_table(rows: list[dict]) -> str:
    cells = [list(TABLE_COLUMNS)] + [[_fmt(r.get(c)) for c in TABLE_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(TABLE_COLUMNS))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
             for row in cells]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def write_table(rows: list[dict], stem: Path) -> None:
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".txt").write_text(format_table(rows))
    tsv = ["\t".join(TABLE_COLUMNS)] + ["\t".join(_fmt(r.get(c)) for c in TABLE_COLUMNS) for r in rows]
    stem.with_suffix(".tsv").write_text("\n".join(tsv) + "\n")
    stem.with_suffix(".json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")


def set_threads(n: int = 1) -> None:
    torch.set_num_threads(n)
