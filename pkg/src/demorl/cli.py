"""Command line: ``demorl {collect-demos,train,eval,metric-bench}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import DemoRLError


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="demorl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="flat dotted-key JSON config")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", type=Path, required=True, help="output directory or file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                       help="extra config override, e.g. schedule.max_steps=2000")

    p = sub.add_parser("collect-demos", help="write scripted demonstrations to a demo directory")
    common(p)
    p.add_argument("--count", type=int, help="number of demonstrations")
    p.add_argument("--png", type=Path, help="also save the first frame of each demo as PNG here")

    p = sub.add_parser("train", help="run the interleaved training schedule")
    common(p)
    for name in ("is", "vc", "shaping"):
        p.add_argument(f"--flag-{name}", type=_bool, metavar="BOOL")

    p = sub.add_parser("eval", help="evaluate a checkpoint with the deterministic policy")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--episodes", type=int, default=10)

    p = sub.add_parser("metric-bench", help="distance-metric comparison on three probe states (CSV)")
    common(p)
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        key, _, value = item.partition("=")
        overrides[key] = json.loads(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    flag_names = {"is": "importance_sampling", "vc": "value_clipping", "shaping": "shaping"}
    for short, long in flag_names.items():
        value = getattr(args, f"flag_{short}", None)
        if value is not None:
            overrides[f"flags.{long}"] = value
    if getattr(args, "count", None) is not None:
        overrides["demos.count"] = args.count
    cfg.update(overrides)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.command == "collect-demos":
            from .harness import collect_demos

            trajs = collect_demos(cfg, args.out)
            for t in trajs:
                print(f"demo {t.index}: {t.length} steps")
            print(f"total steps: {sum(t.length for t in trajs)}")
            if args.png:
                from PIL import Image

                args.png.mkdir(parents=True, exist_ok=True)
                for t in trajs:
                    img = np.round(t.observations[0] * 255).astype(np.uint8)
                    Image.fromarray(img).save(args.png / f"demo_{t.index}_frame0.png")
        elif args.command == "train":
            from .harness import train

            res = train(cfg, args.out)
            print(f"metrics: {res.metrics_path}")
            print(f"final checkpoint: {res.final_checkpoint}")
            print(f"first success step: {res.first_success_step}")
        elif args.command == "eval":
            from .harness import evaluate

            res = evaluate(cfg, args.checkpoint, args.episodes, cfg.seed)
            print(json.dumps({"success_rate": res.success_rate, "mean_return": res.mean_return}))
        elif args.command == "metric-bench":
            from .harness import metric_bench

            out = args.out if args.out.suffix == ".csv" else args.out / "metric_bench.csv"
            for r in metric_bench(cfg, out):
                print(f"{r['metric']:>12}  d(a,b)={r['d_ab']:.4g}  d(a,c)={r['d_ac']:.4g}  ratio={r['ratio']:.4g}")
            print(f"csv: {out}")
    except DemoRLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
