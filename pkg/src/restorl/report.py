"""Figures and tables for a run directory.

Rendering is a pure function of the logs: the same logs give byte-identical
PNG, text and CSV files.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from restorl.metrics import MetricsRecord, RunStore, smooth, spearman_rho

EMPTY_NOTICE = "empty run: no metrics records found"
METRIC_KEYS = ("psnr", "ssim", "frechet_proxy", "ot_cost", "proxy_score")
_PNG_META = {"Software": None}


def _records(path: Path) -> list[MetricsRecord]:
    return RunStore(path).records() if path.exists() else []


def _curve(records):
    pts = [(r.iteration, r.mean_reward) for r in records if r.mean_reward is not None]
    return np.array([p[0] for p in pts]), np.array([p[1] for p in pts], dtype=np.float64)


def _eval_rows(records) -> list[dict]:
    rows = []
    for r in records:
        if r.psnr is None:
            continue
        rows.append({"iteration": r.iteration, "psnr": r.psnr, "ssim": r.ssim,
                     "frechet_proxy": r.frechet_proxy, "ot_cost": r.ot_cost,
                     "proxy_score": r.extra.get("eval_proxy_score")})
    return rows


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_reward_curves(curves: dict[str, tuple[np.ndarray, np.ndarray]], path: Path, window: int = 5) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for name, (it, r) in curves.items():
        line, = ax.plot(it, r, alpha=0.3, lw=1)
        ax.plot(it, smooth(r, window), color=line.get_color(), lw=1.8, label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean reward")
    ax.spines[["top", "right"]].set_visible(False)
    if len(curves) > 1:
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_eval_metrics(rows: list[dict], path: Path) -> None:
    keys = [k for k in ("psnr", "ssim", "proxy_score") if any(r.get(k) is not None for r in rows)]
    fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys), 3), squeeze=False)
    it = [r["iteration"] for r in rows]
    for ax, k in zip(axes[0], keys):
        ax.plot(it, [r.get(k) for r in rows], marker="o", ms=3)
        ax.set_title(k, fontsize=9)
        ax.set_xlabel("iteration")
        ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    _save(fig, path)


def plot_comparison(rows: list[dict], path: Path) -> None:
    """One panel per metric, one bar per table row."""
    keys = [k for k in METRIC_KEYS if any(r.get(k) is not None for r in rows)]
    fig, axes = plt.subplots(1, len(keys), figsize=(2.6 * len(keys), 3.2), squeeze=False)
    labels = [r["label"] for r in rows]
    for ax, k in zip(axes[0], keys):
        vals = [np.nan if r.get(k) is None else r[k] for r in rows]
        ax.bar(range(len(rows)), vals, color="0.5")
        ax.set_xticks(range(len(rows)), labels, rotation=60, ha="right", fontsize=7)
        ax.set_title(k, fontsize=9)
        finite = [v for v in vals if np.isfinite(v)]
        if finite:
            lo, hi = min(finite), max(finite)
            pad = 0.1 * (hi - lo) or 0.05 * abs(hi) or 1.0
            ax.set_ylim(lo - pad, hi + pad)
    fig.tight_layout()
    _save(fig, path)


def _delimited(rows: list[dict], columns, delimiter: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (f"{r[c]:.6g}" if isinstance(r[c], float) else r[c])
                    for c in columns])
    return buf.getvalue()


def render_report(run_dir: str | Path, window: int = 5) -> str:
    """Write ``<run_dir>/report/`` and return a tab-delimited summary for stdout."""
    run_dir = Path(run_dir)
    out = run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    records = _records(run_dir / "metrics.jsonl")
    sub_runs = {p.parent.name: _records(p) for p in sorted(run_dir.glob("runs/*/metrics.jsonl"))}
    sub_runs = {k: v for k, v in sub_runs.items() if v}
    ablation = run_dir / "ablation.json"
    if not records and not sub_runs and not ablation.exists():
        (out / "NOTICE.txt").write_text(EMPTY_NOTICE + "\n")
        return EMPTY_NOTICE + "\n"
    (out / "NOTICE.txt").unlink(missing_ok=True)

    text = []
    curves = {}
    if records:
        curves["run"] = _curve(records)
    curves.update({k: _curve(v) for k, v in sub_runs.items()})
    curves = {k: v for k, v in curves.items() if len(v[1])}
    if curves:
        plot_reward_curves(curves, out / "reward_curve.png", window)
        summary = [{"run": k, "iterations": int(len(r)), "first_reward": float(r[0]), "last_reward": float(r[-1]),
                    "smoothed_spearman": spearman_rho(smooth(r, window)),
                    "reward_diff_var": float(np.var(np.diff(r))) if len(r) > 2 else 0.0}
                   for k, (_, r) in curves.items()]
        cols = ("run", "iterations", "first_reward", "last_reward", "smoothed_spearman", "reward_diff_var")
        (out / "reward_summary.csv").write_text(_delimited(summary, cols, ","))
        text.append(_delimited(summary, cols, "\t"))
    rows = _eval_rows(records)
    if rows:
        plot_eval_metrics(rows, out / "eval_metrics.png")
        cols = ("iteration",) + METRIC_KEYS
        (out / "metrics_table.csv").write_text(_delimited(rows, cols, ","))
        (out / "metrics_table.txt").write_text(_delimited(rows, cols, "\t"))
        text.append(_delimited(rows, cols, "\t"))
    if ablation.exists():
        table = json.loads(ablation.read_text())
        plot_comparison(table, out / "comparison.png")
        cols = ("label",) + METRIC_KEYS + ("final_reward", "reward_diff_var")
        (out / "comparison.csv").write_text(_delimited(table, cols, ","))
        text.append(_delimited(table, cols, "\t"))
    return "\n".join(text)
