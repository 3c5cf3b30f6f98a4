"""Command-line entry point.

Exit codes: 0 success, 2 invalid config or arguments, 3 missing upstream
artifact or reward backend, 4 runtime failure (including a locked run directory).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from restorl import pipeline
from restorl.config import ConfigError, load_config
from restorl.pipeline import EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_OK, EXIT_RUNTIME, DependencyError

log = logging.getLogger("restorl")

VERBS = ("make-data", "train-sft", "train-scorer", "train-rl", "evaluate", "ablate", "report")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable (e.g. rl.clip_eps=0.1)")
    common.add_argument("--output-dir", help="run directory (overrides output_dir)")
    common.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="restorl", description="RL fine-tuning of diffusion restorers")
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb, parents=[common])
        if verb == "evaluate":
            p.add_argument("--checkpoint", help="model checkpoint (default: rl.ckpt, else the SFT checkpoint)")
        if verb == "ablate":
            p.add_argument("--variants", help=f"comma list from {','.join(pipeline.VARIANTS)} (default: all)")
            p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                           help="cartesian sweep axis, repeatable; replaces the variant rows")
    return ap


def _run(args) -> int:
    cfg = load_config(args.config, args.override, args.seed, args.output_dir)
    pipeline.set_threads(args.threads)
    if args.verb == "report":
        from restorl.report import render_report

        sys.stdout.write(render_report(cfg.out))
        return EXIT_OK
    with pipeline.run_lock(cfg.out):
        if args.verb == "make-data":
            print(pipeline.cmd_make_data(cfg))
        elif args.verb == "train-sft":
            ck = pipeline.cmd_train_sft(cfg, resume=args.resume)
            print(f"sft\tstep\t{ck.step}\t{cfg.sft_checkpoint()}")
        elif args.verb == "train-scorer":
            _print_kv(pipeline.cmd_train_scorer(cfg))
        elif args.verb == "train-rl":
            recs = pipeline.cmd_train_rl(cfg, resume=args.resume).records
            evals = [r for r in recs if r.psnr is not None]
            if evals:
                last = evals[-1]
                _print_kv({"iteration": last.iteration, "psnr": last.psnr, "ssim": last.ssim,
                           "proxy_score": last.extra.get("eval_proxy_score")})
        elif args.verb == "evaluate":
            _print_kv(pipeline.cmd_evaluate(cfg, args.checkpoint))
        elif args.verb == "ablate":
            variants = args.variants.split(",") if args.variants else None
            pipeline.cmd_ablate(cfg, variants, args.grid, resume=args.resume)
            sys.stdout.write((cfg.out / "ablation.tsv").read_text())
    return EXIT_OK


def _print_kv(d: dict) -> None:
    for k in sorted(d):
        v = d[k]
        print(f"{k}\t{v:.6g}" if isinstance(v, float) else f"{k}\t{json.dumps(v) if isinstance(v, (dict, list)) else v}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (OSError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
