"""End-to-end model: streams -> per-group connectors -> append -> HGA -> toy head.

Parameters live in a flat ``dict[str, np.ndarray]``.  Each forward builds
a fresh tape and registers every parameter on it, so one tape serves one
loss evaluation and one backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .encoders import (
    GROUP_ORDER,
    EncoderSpec,
    FeatureStream,
    default_specs,
    generate_stream,
    standardize_channels,
)
from .errors import ConfigError, NonFiniteLossError, ShapeError
from .hga import FusedSequence, HgaConfig, hga_forward, sequence_append
from .moec import (
    MoecBank,
    MoecConfig,
    RouterDecision,
    balance_loss,
    expert_forward,
    expert_from_named,
    init_expert,
    moec_forward,
    z_loss,
)

CONNECTORS = ("moec", "mlp")
FUSIONS = ("hga", "append_only")


@dataclass(frozen=True)
class TaskSpec:
    """Planted-factor classification task.

    A sample draws a latent ``z`` of size ``rank``; its label is
    ``argmax(z @ Q)`` for a fixed random ``Q``.  Part codes are ``z`` plus
    per-part offsets, and each encoder group sees its own ``view_noise``
    perturbation of them, so extra groups carry independent evidence.
    """

    num_classes: int = 8
    rank: int = 4
    parts: int = 8
    part_noise: float = 0.5
    token_noise: float = 0.5
    view_noise: float = 0.5
    seed: int = 0
    eval_size: int = 64

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2", key="num_classes")
        for key in ("rank", "parts", "eval_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key=key)


@dataclass(frozen=True)
class ModelConfig:
    encoder_specs: tuple[EncoderSpec, ...] = field(default_factory=default_specs)
    moec: MoecConfig = field(default_factory=MoecConfig)
    hga: HgaConfig = field(default_factory=HgaConfig)
    alpha_balance: float = 0.1
    alpha_z: float = 0.01
    task: TaskSpec = field(default_factory=TaskSpec)
    seed: int = 0
    connector: str = "moec"
    fusion: str = "hga"
    aux_losses: bool = True
    train_connector: bool = True

    def __post_init__(self):
        if not self.encoder_specs:
            raise ConfigError("at least one encoder group is required", key="encoders")
        names = [s.group_name for s in self.encoder_specs]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate encoder groups {names}", key="encoders")
        for s in self.encoder_specs:
            if s.target_dim != self.moec.input_dim:
                raise ConfigError(
                    f"{s.group_name} delivers {s.target_dim} channels, connector expects {self.moec.input_dim}",
                    key="moec.input_dim",
                )
        if self.alpha_balance < 0:
            raise ConfigError("alpha_balance must be >= 0", key="alpha_balance")
        if self.alpha_z < 0:
            raise ConfigError("alpha_z must be >= 0", key="alpha_z")
        if self.connector not in CONNECTORS:
            raise ConfigError(f"connector must be one of {CONNECTORS}", key="connector")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}", key="fusion")

    @property
    def group_names(self) -> list[str]:
        return [s.group_name for s in self.encoder_specs]

    @property
    def total_tokens(self) -> int:
        return sum(s.token_count for s in self.encoder_specs)


def tiny_config(**overrides) -> ModelConfig:
    """Two tokens per group, D=4, hidden=8: small enough for finite differences."""
    specs = default_specs(channel_dim=4, token_counts={g: 2 for g in GROUP_ORDER}, pooling_factor=2)
    base = ModelConfig(
        encoder_specs=specs,
        moec=MoecConfig(input_dim=4, hidden_dim=8, output_dim=4),
    )
    return replace(base, **overrides)


def desk_config(scale: int = 20, **overrides) -> ModelConfig:
    """Default model with every group's token count divided by ``scale`` (at least one token)."""
    specs = tuple(
        replace(s, token_count=max(1, round(s.token_count / scale))) for s in default_specs()
    )
    return replace(ModelConfig(encoder_specs=specs), **overrides)


def with_encoders(config: ModelConfig, names: Sequence[str]) -> ModelConfig:
    """Restrict ``config`` to a subset of its encoder groups."""
    known = {s.group_name: s for s in config.encoder_specs}
    missing = [n for n in names if n not in known]
    if missing:
        raise ConfigError(f"unknown encoder groups {missing}", key="encoders")
    ordered = [known[n] for n in GROUP_ORDER if n in names] + [
        known[n] for n in names if n not in GROUP_ORDER
    ]
    return replace(config, encoder_specs=tuple(ordered))


# --------------------------------------------------------------------------
# toy task data


@dataclass
class Sample:
    streams: dict[str, FeatureStream]
    label: int


def _class_directions(task: TaskSpec) -> np.ndarray:
    return np.random.default_rng([task.seed, 17]).normal(size=(task.rank, task.num_classes))


def make_sample(config: ModelConfig, seed) -> Sample:
    task = config.task
    seed = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    rng = np.random.default_rng(seed)
    z = rng.normal(size=task.rank)
    label = int(np.argmax(z @ _class_directions(task)))
    codes = z + task.part_noise * rng.normal(size=(task.parts, task.rank))
    stream_seed = int(rng.integers(0, 2**31))
    streams = {
        spec.group_name: generate_stream(
            spec,
            stream_seed,
            codes,
            rank=task.rank,
            token_noise=task.token_noise,
            view_noise=task.view_noise,
            loading_seed=task.seed,
        )
        for spec in config.encoder_specs
    }
    return Sample(streams, label)


def make_batch(config: ModelConfig, step: int, batch_size: int) -> list[Sample]:
    """Training batch for ``step``; a pure function of (config.seed, step, index)."""
    return [make_sample(config, [config.seed, 1, step, i]) for i in range(batch_size)]


def make_eval_set(config: ModelConfig) -> list[Sample]:
    """Held-out samples fixed by the task seed, independent of the training seed."""
    return [make_sample(config, [config.task.seed, 2, i]) for i in range(config.task.eval_size)]


# --------------------------------------------------------------------------
# parameters


def _group_index(name: str) -> int:
    return GROUP_ORDER.index(name) if name in GROUP_ORDER else len(GROUP_ORDER) + sum(map(ord, name))


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """Initial parameters.  Expert ``i`` of a group gets the same values under either connector."""
    params = {}
    for spec in config.encoder_specs:
        gi = _group_index(spec.group_name)
        prefix = f"connector.{spec.group_name}"
        if config.connector == "moec":
            params.update(MoecBank.init(config.moec, [config.seed, gi]).named_arrays(prefix))
        else:
            expert = init_expert(config.moec, [config.seed, gi, 1, 0])
            for k in ("w1", "b1", "w2", "b2"):
                params[f"{prefix}.expert0.{k}"] = getattr(expert, k)
    rng = np.random.default_rng([config.seed, 99])
    d, c = config.moec.output_dim, config.task.num_classes
    bound = 1.0 / math.sqrt(d)
    params["head.w"] = rng.uniform(-bound, bound, size=(d, c))
    params["head.b"] = np.zeros((1, c))
    return params


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(config).items()}


# --------------------------------------------------------------------------
# forward and loss


@dataclass
class ForwardResult:
    tape: nx.Tape
    nodes: dict[str, nx.Node]
    outputs: list[FusedSequence]
    decisions: dict[str, RouterDecision]


def _standardized(stream: FeatureStream, spec: EncoderSpec) -> np.ndarray:
    if stream.spec.token_count != spec.token_count or stream.features.shape[1] != spec.channel_dim:
        raise ShapeError(
            f"{spec.group_name}: stream {stream.features.shape} does not match spec "
            f"{(spec.token_count, spec.channel_dim)}"
        )
    if spec.needs_channel_pooling:
        stream = standardize_channels(stream, spec.target_dim)
    return stream.features


def forward_batch(
    params: Mapping[str, np.ndarray],
    batch: Sequence[Mapping[str, FeatureStream]],
    config: ModelConfig,
) -> ForwardResult:
    tape = nx.Tape()
    nodes = {k: tape.parameter(k, params[k]) for k in sorted(params)}
    n = len(batch)
    hidden, decisions = {}, {}
    for spec in config.encoder_specs:
        name = spec.group_name
        x = tape.constant(np.vstack([_standardized(s[name], spec) for s in batch]))
        prefix = f"connector.{name}"
        if config.connector == "moec":
            bank = MoecBank.from_named(nodes, prefix, config.moec.num_experts)
            hidden[name], decisions[name] = moec_forward(x, bank, config.moec)
        else:
            hidden[name] = expert_forward(x, expert_from_named(nodes, f"{prefix}.expert0"))
    outputs = []
    for b in range(n):
        per_group = {}
        for spec in config.encoder_specs:
            g = spec.token_count
            per_group[spec.group_name] = nx.take_rows(
                hidden[spec.group_name], np.arange(b * g, (b + 1) * g)
            )
        seq = sequence_append(per_group)
        if config.fusion == "hga":
            seq = hga_forward(seq, config.hga)[0]
        outputs.append(seq)
    return ForwardResult(tape, nodes, outputs, decisions)


def forward(streams: Mapping[str, FeatureStream], params, config: ModelConfig):
    """Single-sample forward; returns ``(x_out, decisions)``."""
    result = forward_batch(params, [streams], config)
    return result.outputs[0], result.decisions


@dataclass
class LossReport:
    task_loss: float
    balance: dict[str, float]
    zloss: dict[str, float]
    total: float
    alpha_balance: float
    alpha_z: float
    utilization: dict[str, np.ndarray] = field(default_factory=dict)

    def recombined(self) -> float:
        return (
            self.task_loss
            + self.alpha_balance * sum(self.balance.values())
            + self.alpha_z * sum(self.zloss.values())
        )

    def check_finite(self):
        components = [("task_loss", self.task_loss)]
        components += [(f"balance.{g}", v) for g, v in self.balance.items()]
        components += [(f"zloss.{g}", v) for g, v in self.zloss.items()]
        components.append(("total", self.total))
        for name, value in components:
            if not math.isfinite(value):
                raise NonFiniteLossError(name, value)

    def as_dict(self) -> dict:
        return {
            "task_loss": self.task_loss,
            "balance": dict(self.balance),
            "zloss": dict(self.zloss),
            "total": self.total,
            "alpha_balance": self.alpha_balance,
            "alpha_z": self.alpha_z,
            "utilization": {g: [float(x) for x in u] for g, u in self.utilization.items()},
        }


def _sum_nodes(nodes):
    out = nodes[0]
    for n in nodes[1:]:
        out = nx.add(out, n)
    return out


def total_loss(
    outputs: Sequence[FusedSequence],
    decisions: Mapping[str, RouterDecision],
    labels: Sequence[int],
    head: tuple,
    config: ModelConfig,
):
    """Cross-entropy of the pooled head plus weighted balance and z-losses.

    Returns ``(report, total_node)``.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (len(outputs),):
        raise ShapeError(f"expected {len(outputs)} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= config.task.num_classes):
        raise ShapeError(f"labels must lie in [0, {config.task.num_classes})")
    head_w, head_b = head
    pooled = nx.concat_rows([nx.mean_rows(o.tokens) for o in outputs])
    logits = nx.add_bias(nx.matmul(pooled, head_w), head_b)
    picked = nx.take_along_rows(logits, labels.reshape(-1, 1))
    task = nx.mean_all(nx.sub(nx.logsumexp_rows(logits), picked))

    names = [g for g in config.group_names]
    if config.connector == "moec":
        b_nodes = {g: balance_loss(decisions[g]) for g in names}
        z_nodes = {g: z_loss(decisions[g]) for g in names}
    else:
        b_nodes, z_nodes = {}, {}
    alpha_b = config.alpha_balance if config.aux_losses else 0.0
    alpha_z = config.alpha_z if config.aux_losses else 0.0
    total = task
    if b_nodes:
        total = nx.add(total, nx.scale(_sum_nodes(list(b_nodes.values())), alpha_b))
        total = nx.add(total, nx.scale(_sum_nodes(list(z_nodes.values())), alpha_z))
    report = LossReport(
        task_loss=task.item(),
        balance={g: (b_nodes[g].item() if g in b_nodes else 0.0) for g in names},
        zloss={g: (z_nodes[g].item() if g in z_nodes else 0.0) for g in names},
        total=total.item(),
        alpha_balance=alpha_b,
        alpha_z=alpha_z,
        utilization={g: decisions[g].utilization() for g in names if g in decisions},
    )
    return report, total


def evaluate(params, batch: Sequence[Sample], config: ModelConfig):
    """Forward plus loss; returns ``(report, total_node, forward_result)``."""
    result = forward_batch(params, [s.streams for s in batch], config)
    head = (result.nodes["head.w"], result.nodes["head.b"])
    report, total = total_loss(result.outputs, result.decisions, [s.label for s in batch], head, config)
    return report, total, result


def loss_and_grad(params, batch: Sequence[Sample], config: ModelConfig):
    report, total, result = evaluate(params, batch, config)
    return report, result.tape.backward(total), result


def task_loss_on(params, samples: Sequence[Sample], config: ModelConfig) -> float:
    return evaluate(params, samples, config)[0].task_loss


# --------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    kind: str = "sgd"
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def _trainable(name: str, config: ModelConfig) -> bool:
    return config.train_connector or not name.startswith("connector.")


def train_step(params, batch: Sequence[Sample], state: OptimizerState, lr: float, config: ModelConfig):
    """One gradient step.  Returns ``(new_params, report, new_state)``."""
    report, grads, result = loss_and_grad(params, batch, config)
    report.check_finite()
    new_params, velocity = {}, dict(state.velocity)
    for name, value in params.items():
        if not _trainable(name, config):
            new_params[name] = value
            continue
        g = grads[name]
        if state.kind == "momentum":
            v = state.momentum * velocity.get(name, np.zeros_like(value)) + g
            velocity[name] = v
            g = v
        elif state.kind != "sgd":
            raise ConfigError(f"unknown optimizer '{state.kind}'", key="optimizer")
        new_params[name] = value - lr * g
    new_state = OptimizerState(state.kind, state.momentum, velocity, state.step + 1)
    return new_params, report, new_state


def learning_rate(base: float, step: int, total_steps: int, schedule: str = "constant") -> float:
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return 0.5 * base * (1.0 + math.cos(math.pi * step / max(total_steps, 1)))
    raise ConfigError(f"unknown schedule '{schedule}'", key="schedule")


def fit(
    params,
    config: ModelConfig,
    steps: int,
    batch_size: int,
    lr: float,
    *,
    state: OptimizerState | None = None,
    start_step: int = 0,
    schedule: str = "constant",
    total_steps: int | None = None,
    on_step: Callable | None = None,
):
    """Run ``steps`` training steps from ``start_step``; returns ``(params, state, reports)``."""
    state = state or OptimizerState()
    total_steps = total_steps or start_step + steps
    reports = []
    for step in range(start_step, start_step + steps):
        batch = make_batch(config, step, batch_size)
        rate = learning_rate(lr, step, total_steps, schedule)
        params, report, state = train_step(params, batch, state, rate, config)
        reports.append(report)
        if on_step is not None:
            on_step(step, params, state, report)
    return params, state, reports


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def _block(name: str) -> str:
    parts = name.split(".")
    return ".".join(parts[:3]) if parts[0] == "connector" else parts[0]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)


def gradient_check(
    config: ModelConfig,
    tolerance: float = 1e-4,
    *,
    batch_size: int = 2,
    step: int = 0,
    h: float = 1e-5,
    corrupt: Callable[[dict], dict] | None = None,
    entries_per_array: int | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of the full loss with central differences.

    Meant for tiny configurations; ``corrupt`` may rewrite the analytic
    gradients (negative controls).
    """
    params = init_params(config)
    batch = make_batch(config, step, batch_size)
    _, grads, _ = loss_and_grad(params, batch, config)
    if corrupt is not None:
        grads = corrupt(grads)
    masks = {}
    if entries_per_array is not None:
        rng = np.random.default_rng([config.seed, 5])
        for name, value in params.items():
            n = min(entries_per_array, value.size)
            mask = np.zeros(value.size, dtype=bool)
            mask[rng.choice(value.size, size=n, replace=False)] = True
            masks[name] = mask.reshape(value.shape)
    numeric = nx.finite_diff_grad(
        lambda p: evaluate(p, batch, config)[0].total, params, h=h, masks=masks or None
    )
    blocks: dict[str, float] = {}
    for name in params:
        a, n = grads[name], numeric[name]
        if name in masks:
            a, n = a[masks[name]], n[masks[name]]
        err = float(relative_error(a, n).max()) if a.size else 0.0
        key = _block(name)
        blocks[key] = max(blocks.get(key, 0.0), err)
    return GradCheckReport(blocks, tolerance)


# --------------------------------------------------------------------------
# FLOPs accounting


@dataclass
class FlopsEstimate:
    """Multiply-add counts for one forward pass over one sample."""

    components: dict[str, int]
    tokens: int

    @property
    def shared(self) -> int:
        return sum(v for k, v in self.components.items() if k not in ("mlp_connector", "moec_experts", "router"))

    @property
    def total_mlp(self) -> int:
        return self.components["mlp_connector"] + self.shared

    @property
    def total_moec(self) -> int:
        return self.components["moec_experts"] + self.components["router"] + self.shared

    @property
    def moec_delta(self) -> int:
        return self.total_moec - self.total_mlp

    @property
    def moec_delta_fraction(self) -> float:
        return self.moec_delta / self.total_moec

    def gflops(self, macs: int) -> float:
        return 2.0 * macs / 1e9


def flops_estimate(config: ModelConfig) -> FlopsEstimate:
    m = config.moec
    groups = [s.token_count for s in config.encoder_specs]
    t = sum(groups)
    d = m.output_dim
    per_token_mlp = m.input_dim * m.hidden_dim + m.hidden_dim * d
    comps = {
        "mlp_connector": t * per_token_mlp,
        "moec_experts": t * m.top_k * per_token_mlp,
        "router": t * m.input_dim * m.num_experts,
        "hga_similarity": 0,
        "hga_normalize": 0,
        "hga_aggregate": 0,
        "gate": 0,
        "head": t * d + d * config.task.num_classes,
    }
    if config.fusion == "hga":
        for g in groups:
            comps["hga_similarity"] += g * g * d + g * (t - g) * d
            picks = min(config.hga.top_m, g - 1) + min(config.hga.top_n, t - g)
            comps["hga_aggregate"] += g * max(picks, 0) * d
        # one norm per token, one rescale per similarity entry
        comps["hga_normalize"] = t * d + t * t
        comps["gate"] = 2 * t * d
    return FlopsEstimate(comps, t)
