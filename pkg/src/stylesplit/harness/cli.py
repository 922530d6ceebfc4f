"""Command-line entry points.

    stylesplit pretrain  --config cfg.yaml --out runs/exp1
    stylesplit probe     --ckpt runs/exp1/checkpoint --branch style --fraction 0.10 --target style
    stylesplit gradcheck [--seeds 20] [--tol 1e-4]
    stylesplit ablate    --config cfg.yaml --out runs/abl --variants no-fft,no-swd,no-fft-swd,no-jepa
    stylesplit report    --metrics runs/exp1

pretrain writes metrics.jsonl and a final checkpoint under --out; probe
prints one JSON record and appends it next to the checkpoint; report renders
report.md plus PNG figures alongside the metrics files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import torch

from .checkpoint import load_checkpoint
from .config import config_from_manifest, load_config
from .data import make_dataset
from .gradcheck import format_table, run_gradcheck
from .metrics import MetricsWriter
from .protocol import run_ablation, run_pretrain, run_probe
from .report import write_report


def _cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    if args.steps is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, steps=args.steps)
    os.makedirs(args.out, exist_ok=True)
    metrics = MetricsWriter(os.path.join(args.out, "metrics.jsonl"))
    run_pretrain(
        cfg,
        metrics=metrics,
        log_every=args.log_every,
        save_dir=os.path.join(args.out, "checkpoint"),
        save_every=args.save_every,
    )
    print(f"pretrained {cfg.steps} steps -> {args.out}")
    return 0


def _cmd_probe(args) -> int:
    state, manifest = load_checkpoint(args.ckpt)
    if manifest.get("run_config") is None:
        print("checkpoint has no run config echo; cannot rebuild the dataset", file=sys.stderr)
        return 2
    cfg = config_from_manifest(manifest["run_config"])
    dataset = make_dataset(cfg.n_samples, cfg.seed, cfg.resolution)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.ckpt))
    metrics = MetricsWriter(os.path.join(out_dir, "metrics.jsonl"))
    record = run_probe(state, dataset, args.branch, args.target, args.fraction, cfg, metrics)
    print(json.dumps(record, sort_keys=True))
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_gradcheck(seeds=args.seeds)
    print(format_table(results, args.tol))
    worst = max(results.values())
    if worst > args.tol:
        print(f"FAIL: worst relative error {worst:.3e} > {args.tol:g}")
        return 1
    print(f"ok: worst relative error {worst:.3e} <= {args.tol:g} over {args.seeds} seeds")
    return 0


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    metrics = MetricsWriter(os.path.join(args.out, "metrics.jsonl"))
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    records = run_ablation(cfg, variants, metrics, cache_root=args.cache)
    for rec in records:
        print(json.dumps({k: rec[k] for k in ("variant", "accuracy", "macro_f1")}, sort_keys=True))
    return 0


def _cmd_report(args) -> int:
    path = write_report(args.metrics, args.out)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stylesplit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None, help="override config steps")
    p.add_argument("--log-every", type=int, default=1)
    p.add_argument("--save-every", type=int, default=None)
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe on a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--branch", required=True, choices=("style", "content", "fusion"))
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--target", required=True, choices=("style", "content"))
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference sweep over all ops")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("ablate", help="loss-term ablation sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", required=True, help="comma list, e.g. no-fft,no-swd,no-jepa")
    p.add_argument("--cache", default=None, help="reuse finished runs from this directory")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("report", help="render markdown + figures from metrics")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
