"""Command-line entry point.

Verbs::

    run                 train one configuration
    ablate              train every cell of an ablation matrix
    grad-check          compare reverse-mode and finite-difference gradients
    flops               print the multiply-add estimate for a configuration
    inspect-checkpoint  describe a checkpoint file

Exit status: 0 success, 1 configuration error, 2 numeric failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from ..errors import CheckpointError, ConfigError, NonFiniteLossError
from ..pipeline import flops_estimate, gradient_check, tiny_config
from .checkpoint import load_checkpoint
from .config import ExperimentConfig, default_config, load_config, parse_override
from .runner import format_table, run_ablation_matrix, run_experiment

OUT_DIR_ENV = "MOEC_HGA_OUT_DIR"

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="TOML experiment file (defaults apply to missing keys)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", metavar="DIR", help=f"output directory (also ${OUT_DIR_ENV})")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moec-hga", description="MoE connector + group attention experiments")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="train one configuration")
    _common(p)
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint")

    p = sub.add_parser("ablate", help="run an ablation matrix")
    _common(p)
    p.add_argument("--axis", action="append", default=[], metavar="KEY=V1,V2",
                   help="one sweep axis; values separated by ',' (use '+' inside encoder lists)")

    p = sub.add_parser("grad-check", help="finite-difference gradient check")
    _common(p)
    p.add_argument("--tiny", action="store_true", help="use the tiny built-in model instead of the config")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=1)

    p = sub.add_parser("flops", help="analytic multiply-add estimate")
    _common(p)

    p = sub.add_parser("inspect-checkpoint", help="describe a checkpoint")
    p.add_argument("path")
    return parser


def resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else default_config()
    overrides = dict(parse_override(item) for item in args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    out = args.out or os.environ.get(OUT_DIR_ENV)
    if out:
        overrides["out_dir"] = out
    return config.with_overrides(overrides) if overrides else config


def parse_axis(item: str) -> tuple[str, list]:
    key, _, raw = item.partition("=")
    if not raw:
        raise ConfigError(f"axis '{item}' is not KEY=V1,V2")
    values = []
    for part in raw.split(","):
        _, value = parse_override(f"{key}={part}")
        values.append(value)
    return key.strip(), values


def _cmd_run(args, out) -> int:
    config = resolve_config(args)
    result = run_experiment(config, resume_from=args.resume)
    last = result.records[-1] if result.records else None
    if last is not None:
        print(f"step {last['step']}: task_loss={last['task_loss']:.6f} total={last['total']:.6f}", file=out)
    print(f"wrote {result.out_dir}", file=out)
    return EXIT_OK


def _cmd_ablate(args, out) -> int:
    config = resolve_config(args)
    axes = dict(parse_axis(a) for a in args.axis)
    rows = run_ablation_matrix(config, axes)
    out.write(format_table(rows))
    return EXIT_OK if all(r.get("error") is None for r in rows) else EXIT_NUMERIC


def _cmd_grad_check(args, out) -> int:
    if args.tiny:
        base_seed = args.seed or 0
        configs = [tiny_config(seed=base_seed + i) for i in range(args.seeds)]
    else:
        config = resolve_config(args)
        configs = [config.with_overrides({"seed": config["seed"] + i}).model_config() for i in range(args.seeds)]
    ok = True
    for model in configs:
        report = gradient_check(model, args.tolerance, batch_size=args.batch_size)
        ok &= report.passed
        status = "pass" if report.passed else "FAIL"
        print(f"seed {model.seed}: worst {report.worst:.3e} {status}", file=out)
        for block, err in sorted(report.max_rel_error.items()):
            print(f"  {block:<28} {err:.3e}", file=out)
    return EXIT_OK if ok else EXIT_NUMERIC


def _cmd_flops(args, out) -> int:
    model = resolve_config(args).model_config()
    est = flops_estimate(model)
    rows = {k: v for k, v in est.components.items()}
    rows.update(total_mlp=est.total_mlp, total_moec=est.total_moec, moec_delta=est.moec_delta)
    print(f"tokens {est.tokens}", file=out)
    for name, macs in rows.items():
        print(f"{name:<16} {macs:>16d} MACs  {est.gflops(macs):12.6f} GFLOPs", file=out)
    print(f"{'delta_fraction':<16} {est.moec_delta_fraction:.6f}", file=out)
    return EXIT_OK


def _cmd_inspect(args, out) -> int:
    state = load_checkpoint(args.path)
    info = {
        "step": state.step,
        "rng": state.rng,
        "optimizer": {"kind": state.optimizer.kind, "momentum": state.optimizer.momentum,
                      "velocity_arrays": len(state.optimizer.velocity)},
        "arrays": {name: "x".join(map(str, v.shape)) for name, v in sorted(state.params.items())},
        "config": dict(state.config.settings),
    }
    json.dump(info, out, indent=2, sort_keys=True)
    out.write("\n")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "ablate": _cmd_ablate,
    "grad-check": _cmd_grad_check,
    "flops": _cmd_flops,
    "inspect-checkpoint": _cmd_inspect,
}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.verb](args, out)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
