"""Seeded training runs and the ablation matrix."""

from __future__ import annotations

import itertools
import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from ..errors import ConfigError, NonFiniteLossError
from ..pipeline import (
    OptimizerState,
    flops_estimate,
    init_params,
    learning_rate,
    make_batch,
    make_eval_set,
    evaluate,
    train_step,
)
from .checkpoint import TrainingState, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dumps_config

METRICS_FILE = "metrics.jsonl"
TIMINGS_FILE = "timings.jsonl"
CHECKPOINT_FILE = "checkpoint.bin"


def metric_record(step: int, lr: float, report) -> dict:
    """One self-describing metric line; ``step`` counts completed steps."""
    record = {"step": step, "lr": lr}
    record.update(report.as_dict())
    return record


def _dump(record: Mapping) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=True) + "\n"


@dataclass
class RunResult:
    out_dir: str
    state: TrainingState
    records: list[dict] = field(default_factory=list)


def run_experiment(config: ExperimentConfig, resume_from=None, out_dir=None) -> RunResult:
    """Train for ``config.steps`` steps, writing metrics and checkpoints under the output directory.

    With ``resume_from`` the parameters, optimizer state and step counter come
    from that checkpoint and training continues up to ``config.steps`` total
    steps, appending to the existing metric stream.
    """
    out_dir = out_dir or config.out_dir
    os.makedirs(out_dir, exist_ok=True)
    model = config.model_config()
    if resume_from is not None:
        saved = load_checkpoint(resume_from)
        if saved.params.keys() != init_params(model).keys():
            raise ConfigError("checkpoint parameters do not match the configured model")
        params, opt, start = saved.params, saved.optimizer, saved.step
        mode = "a"
    else:
        params = init_params(model)
        opt = OptimizerState(config["optimizer"], config["momentum"])
        start, mode = 0, "w"

    total = config.steps
    records = []
    state = TrainingState(config, params, opt, start)
    with open(os.path.join(out_dir, METRICS_FILE), mode, encoding="utf-8") as metrics, \
            open(os.path.join(out_dir, TIMINGS_FILE), mode, encoding="utf-8") as timings:
        for step in range(start, total):
            lr = learning_rate(config["learning_rate"], step, total, config["schedule"])
            batch = make_batch(model, step, config["batch_size"])
            tic = time.perf_counter()
            params, report, opt = train_step(params, batch, opt, lr, model)
            elapsed = time.perf_counter() - tic
            done = step + 1
            state = TrainingState(config, params, opt, done, {"seed": config["seed"], "next_step": done})
            if done % config["metric_every"] == 0 or done == total:
                record = metric_record(done, lr, report)
                records.append(record)
                metrics.write(_dump(record))
                metrics.flush()
                # wall-clock lives in its own stream so the metric stream stays reproducible
                timings.write(_dump({"step": done, "seconds": elapsed}))
            every = config["checkpoint_every"]
            if every and done % every == 0 and done != total:
                save_checkpoint(state, os.path.join(out_dir, f"checkpoint_step{done}.bin"))
    save_checkpoint(state, os.path.join(out_dir, CHECKPOINT_FILE))
    with open(os.path.join(out_dir, "config.toml"), "w", encoding="utf-8") as fh:
        fh.write(dumps_config(config))
    return RunResult(out_dir, state, records)


# --------------------------------------------------------------------------
# ablation matrix


def utilization_entropy(utilization: Mapping[str, Sequence[float]]) -> float:
    """Mean over groups of the Shannon entropy (nats) of the expert-slot shares."""
    if not utilization:
        return 0.0
    values = []
    for shares in utilization.values():
        p = np.asarray(shares, dtype=float)
        p = p[p > 0]
        values.append(float(-(p * np.log(p)).sum()))
    return float(np.mean(values))


def expand_axes(base: ExperimentConfig, axes: Mapping[str, Sequence[Any]]) -> list[tuple[dict, ExperimentConfig]]:
    """Cartesian product of the axes; cells resolving to the same config are kept once."""
    keys = list(axes)
    cells, seen = [], set()
    for combo in itertools.product(*(axes[k] for k in keys)):
        overrides = dict(zip(keys, combo))
        config = base.with_overrides(overrides)
        text = dumps_config(config)
        if text in seen:
            continue
        seen.add(text)
        cells.append((overrides, config))
    return cells


def _cell_label(overrides: Mapping) -> str:
    parts = []
    for k, v in overrides.items():
        v = "+".join(v) if isinstance(v, (list, tuple)) else v
        parts.append(f"{k}={v}")
    return ",".join(parts) or "base"


def run_ablation_matrix(base: ExperimentConfig, axes: Mapping[str, Sequence[Any]], out_dir=None) -> list[dict]:
    """Train every cell with the base seed and summarise it.

    A failing cell gets an ``error`` entry and the sweep moves on.  Writes
    ``summary.json`` and an aligned ``summary.txt`` under ``out_dir``.
    """
    out_dir = out_dir or base.out_dir
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i, (overrides, config) in enumerate(expand_axes(base, axes)):
        row: dict[str, Any] = {"cell": i, "label": _cell_label(overrides), "overrides": overrides}
        try:
            model = config.model_config()
            est = flops_estimate(model)
            row.update(
                tokens=model.total_tokens,
                expert_macs=est.components["moec_experts"] if model.connector == "moec" else est.components["mlp_connector"],
                total_macs=est.total_moec if model.connector == "moec" else est.total_mlp,
                moec_delta_fraction=est.moec_delta_fraction,
            )
            result = run_experiment(config, out_dir=os.path.join(out_dir, f"cell{i:03d}"))
            report, _, _ = evaluate(result.state.params, make_eval_set(model), model)
            report.check_finite()
            row.update(
                final_train_loss=result.records[-1]["task_loss"],
                eval_task_loss=report.task_loss,
                utilization_entropy=utilization_entropy(report.utilization),
                trajectory=[r["task_loss"] for r in result.records],
                error=None,
            )
        except (ConfigError, NonFiniteLossError, OSError, ValueError) as err:
            row["error"] = f"{type(err).__name__}: {err}"
        rows.append(row)
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_table(rows))
    return rows


_COLUMNS = (
    ("cell", "cell", "{}"),
    ("label", "label", "{}"),
    ("tokens", "tokens", "{}"),
    ("eval_task_loss", "eval_loss", "{:.6f}"),
    ("utilization_entropy", "util_H", "{:.4f}"),
    ("expert_macs", "expert_macs", "{}"),
    ("total_macs", "total_macs", "{}"),
    ("moec_delta_fraction", "delta_frac", "{:.5f}"),
)


def _fmt(fmt: str, value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return fmt.format(value)


def format_table(rows: Sequence[Mapping]) -> str:
    header = [title for _, title, _ in _COLUMNS] + ["error"]
    body = []
    for row in rows:
        cells = [_fmt(fmt, row.get(key)) for key, _, fmt in _COLUMNS]
        cells.append(row.get("error") or "")
        body.append(cells)
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header, *body]]
    return "\n".join(lines) + "\n"
