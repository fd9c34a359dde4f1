"""Command-line entry point: ``rectiflow {train,sample,analyze,bench,reproduce}``.

Settings resolve as defaults < ``--config`` file < ``--set key=value`` < dedicated flags.
Exit status: 0 success, 2 configuration or usage error, 1 runtime fault.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from . import config as cfg
from . import pipeline
from .errors import ConfigError, RectiflowError

log = logging.getLogger("rectiflow")

# flag dest -> config key, per subcommand family
COMMON_FLAGS = {"seed": "seed", "out": "out", "run_id": "run_id", "data_dir": "data.dir", "toy": "data.toy",
                "subset": "data.subset", "preset": "model.preset"}
TRAIN_FLAGS = {"paradigm": "train.paradigm", "steps": "train.steps", "batch_size": "train.batch_size",
               "lr": "train.lr", "clip_grad": "train.clip_grad"}
SAMPLE_FLAGS = {"ckpt": "sample.ckpt", "sampler": "sample.sampler", "steps": "sample.steps",
                "count": "sample.count", "record_traj": "sample.record_traj", "grid": "sample.grid"}
ANALYZE_FLAGS = {"ckpt_flow": "analyze.ckpt_flow", "ckpt_diff": "analyze.ckpt_diff", "steps": "analyze.steps",
                 "n": "analyze.n", "flow_sampler": "analyze.flow_sampler", "diff_sampler": "analyze.diff_sampler",
                 "grid_res": "analyze.grid_res", "t_eval": "analyze.t_eval", "K": "analyze.K"}
BENCH_FLAGS = {"ckpt_flow": "bench.ckpt_flow", "ckpt_diff": "bench.ckpt_diff", "steps_list": "bench.steps_list",
               "solver_steps": "bench.solver_steps", "matched": "bench.matched", "count": "bench.count",
               "feature_space": "bench.feature_space",
               "reps": "bench.reps", "warmup": "bench.warmup", "batch": "bench.batch"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run settings")
    g.add_argument("--config", help="flat key = value settings file")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    g.add_argument("--seed", type=int, help="master seed")
    g.add_argument("--out", help="root directory; the run writes to OUT/<run-id>/")
    g.add_argument("--run-id", help="run directory name (default: UTC timestamp + seed hash)")
    g.add_argument("--deterministic", action="store_true", default=None,
                   help="serial execution, pinned report timestamps, zero wall-clock columns")
    g.add_argument("--data-dir", help="directory with MNIST IDX files (otherwise a toy set is used)")
    g.add_argument("--toy", help="toy generator: two_gaussians, gaussian_ring or single_gaussian")
    g.add_argument("--subset", type=int, help="use only the first n MNIST training images")
    g.add_argument("--preset", help="backbone preset: paper_unet, tiny_unet or toy_mlp")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rectiflow", description="Train, sample, analyze and benchmark diffusion and flow models.",
                     epilog="Config keys: " + ", ".join(cfg.SCHEMA))
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a diffusion or flow model")
    _common(p)
    p.add_argument("--paradigm", choices=("diffusion", "flow"))
    p.add_argument("--steps", type=int, help="optimizer steps")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--clip-grad", type=float, help="gradient norm clip (0 = off)")

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    _common(p)
    p.add_argument("--ckpt", help="checkpoint directory")
    p.add_argument("--sampler", choices=("ancestral", "ddim", "euler", "rk4"))
    p.add_argument("--steps", type=int, help="sampling steps")
    p.add_argument("--count", type=int, help="number of samples")
    p.add_argument("--record-traj", metavar="NAME", help="save the full trajectory under samples/NAME")
    p.add_argument("--grid", metavar="NAME", help="save a sample grid under figures/NAME")

    p = sub.add_parser("analyze", help="trajectory geometry")
    p.add_argument("what", choices=("curvature", "field", "interp"))
    _common(p)
    p.add_argument("--ckpt-flow")
    p.add_argument("--ckpt-diff")
    p.add_argument("--steps", type=int, help="sampling steps")
    p.add_argument("--n", type=int, help="number of trajectories")
    p.add_argument("--flow-sampler", choices=("euler", "rk4"))
    p.add_argument("--diff-sampler", choices=("ancestral", "ddim"))
    p.add_argument("--grid-res", type=int, help="field lattice resolution")
    p.add_argument("--t-eval", type=float, help="time of the projected field")
    p.add_argument("--K", type=int, help="intermediate interpolation frames")

    p = sub.add_parser("bench", help="step ablation, solver sensitivity or latency")
    p.add_argument("experiment", choices=("steps", "solver", "latency"))
    _common(p)
    p.add_argument("--ckpt-flow")
    p.add_argument("--ckpt-diff")
    p.add_argument("--steps-list", help="comma-separated step counts for the ablation")
    p.add_argument("--solver-steps", help="comma-separated Euler step counts for solver pairs")
    p.add_argument("--matched", choices=("nfe", "steps"))
    p.add_argument("--feature-space", choices=("pixel", "classifier"), help="Frechet distance feature space")
    p.add_argument("--count", type=int, help="samples per configuration")
    p.add_argument("--reps", type=int, help="latency repetitions")
    p.add_argument("--warmup", type=int, help="latency warmup runs")
    p.add_argument("--batch", type=int, help="latency batch size")

    p = sub.add_parser("reproduce", help="run the whole desk-scale reproduction")
    p.add_argument("config_dir", help="directory holding toy.cfg (and optionally mnist.cfg)")
    p.add_argument("--out", default="out", help="root output directory")
    p.add_argument("--profile", choices=("toy", "mnist", "all"), default="toy")
    p.add_argument("--steps", type=int, help="override train.steps (quick runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _flag_layer(args: argparse.Namespace, mapping: dict) -> dict:
    layer = {}
    for dest, key in mapping.items():
        value = getattr(args, dest, None)
        if value is not None:
            layer[key] = value
    return layer


def _set_layer(items: Sequence[str]) -> dict:
    layer = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        layer[key] = value
    return layer


def settings_from_args(args: argparse.Namespace) -> dict:
    file_layer = cfg.read_file(args.config) if args.config else {}
    family = {"train": TRAIN_FLAGS, "sample": SAMPLE_FLAGS, "analyze": ANALYZE_FLAGS,
              "bench": BENCH_FLAGS}[args.command]
    flags = _flag_layer(args, {**COMMON_FLAGS, **family})
    if args.deterministic:
        flags["deterministic"] = True
    return cfg.resolve(file_layer, _set_layer(args.set), flags)


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "reproduce":
        from .reproduce import reproduce_all
        return reproduce_all(args.config_dir, out=args.out, profile=args.profile, steps=args.steps)
    settings = settings_from_args(args)
    command = args.command if args.command in ("train", "sample") else \
        f"{args.command} {getattr(args, 'what', None) or args.experiment}"
    run = pipeline.make_run(command, settings)
    if args.command == "train":
        result = pipeline.cmd_train(run)
    elif args.command == "sample":
        result = pipeline.cmd_sample(run)
    elif args.command == "analyze":
        result = {"curvature": pipeline.cmd_curvature, "field": pipeline.cmd_field,
                  "interp": pipeline.cmd_interp}[args.what](run)
        if args.what == "field":
            result = {k: result[k] for k in ("t_eval", "chord_length", "mean_e1_along_chord")}
    else:
        result = pipeline.cmd_bench(run, args.experiment).to_dict()["rows"]
    print(f"run directory: {run.out_dir}")
    if isinstance(result, (dict, list)):
        print(json.dumps(result, indent=1, sort_keys=True, default=str))
    else:
        print(result)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (RectiflowError, OSError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
