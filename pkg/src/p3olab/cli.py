"""Command-line front end: ``train``, ``ablate``, ``grid``, ``plot`` and ``eval``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import experiment as ex
from .objectives import VARIANTS
from .trainer import evaluate


def _seeds(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty seed list")
    return out


def _common(p: argparse.ArgumentParser, algo: bool = True) -> None:
    if algo:
        p.add_argument("--algo", default="p3o", choices=VARIANTS, help="objective variant")
    p.add_argument("--env", default=None, help="chain, pole or pointmass (default: from config, else pole)")
    p.add_argument("--seed", type=_seeds, default=[0], help="seed list such as 0,1,2 or 0-3")
    p.add_argument("--steps", type=int, default=None, help="total environment steps")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--out", default=None, help=f"output directory (env {ex.OUT_ENV_VAR} overrides)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="p3olab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("train", help="train one variant over a seed list"))

    p = sub.add_parser("ablate", help="train the four ablation variants")
    _common(p, algo=False)
    p.set_defaults(seed=[0, 1, 2, 3])

    p = sub.add_parser("grid", help="sensitivity grid over epochs, minibatch size and step size")
    _common(p)
    p.add_argument("--epochs", default="5,10")
    p.add_argument("--minibatch", default="32,64")
    p.add_argument("--lr", default="1e-4,3e-4")

    p = sub.add_parser("plot", help="SVG learning curves from metric CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--metric", default="eval_return")
    p.add_argument("--out", required=True, help="SVG file to write")
    p.add_argument("--title", default=None)

    p = sub.add_parser("eval", help="greedy evaluation of saved weights")
    p.add_argument("params", help=".npz file written by 'train'")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _base_config(args):
    overrides = {}
    if args.env is not None:
        overrides["env"] = args.env
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    if args.config is not None:
        return ex.read_config(args.config, **overrides)
    return ex.parse_config("", **overrides)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _run(spec: ex.ExperimentSpec) -> int:
    result = ex.run_experiment(spec, log=lambda msg: print(msg, flush=True))
    print(f"summary: {result.summary_path}")
    for row in ex.read_summary(result.summary_path):
        print(f"  {row['variant']:<24} {row['env']:<10} n={row['n_seeds']}  "
              f"final return {row['mean']:.4g} +/- {row['std']:.3g}")
    return result.exit_status


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            path = ex.emit_plot(args.csv, args.metric, args.out, title=args.title)
            print(path)
            return 0
        if args.command == "eval":
            config, nets = ex.load_params(args.params)
            score = evaluate(nets.policy, config.env, args.episodes, args.seed)
            print(f"{config.env} {config.variant}: mean greedy return {score:.6g} over {args.episodes} episodes")
            return 0
        base = _base_config(args)
        env = base.env
        if args.command == "train":
            cells = [ex.Cell(args.algo, env, args.seed)]
        elif args.command == "ablate":
            cells = ex.ablation_cells(env, args.seed)
        else:
            cells = ex.grid_cells(args.algo, env, args.seed, [int(e) for e in _floats(args.epochs)],
                                  [int(m) for m in _floats(args.minibatch)], _floats(args.lr))
        spec = ex.ExperimentSpec(cells, out_dir=args.out, base_config=base, save_params=args.command == "train")
        return _run(spec)
    except (ex.ConfigError, ex.SchemaError, ValueError, OSError) as exc:
        print(f"p3olab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
