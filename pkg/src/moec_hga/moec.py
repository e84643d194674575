"""Sparse mixture-of-experts connector.

A router scores each token against ``E`` experts, keeps the top ``K``,
re-weights them and sums the selected expert outputs.  Only the selected
experts run on a token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError

RENORMALIZE_MODES = ("softmax", "sum")


@dataclass(frozen=True)
class MoecConfig:
    num_experts: int = 4
    top_k: int = 2
    input_dim: int = 16
    hidden_dim: int = 16
    output_dim: int = 16
    # "softmax" applies a second softmax to the selected probabilities;
    # "sum" divides them by their sum instead
    renormalize: str = "softmax"

    def __post_init__(self):
        for key in ("num_experts", "top_k", "input_dim", "hidden_dim", "output_dim"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key=key)
        if self.top_k > self.num_experts:
            raise ConfigError(
                f"top_k={self.top_k} exceeds num_experts={self.num_experts}", key="top_k"
            )
        if self.renormalize not in RENORMALIZE_MODES:
            raise ConfigError(f"renormalize must be one of {RENORMALIZE_MODES}", key="renormalize")


@dataclass
class Expert:
    w1: object
    b1: object
    w2: object
    b2: object


@dataclass
class MoecBank:
    """Router parameters and ``E`` experts.  Fields hold arrays or tape nodes."""

    router_w: object
    router_b: object
    experts: list[Expert] = field(default_factory=list)

    @classmethod
    def init(cls, config: MoecConfig, seed) -> "MoecBank":
        router = np.random.default_rng([*_seed_list(seed), 0])
        bound = 1.0 / np.sqrt(config.input_dim)
        router_w = router.uniform(-bound, bound, size=(config.input_dim, config.num_experts))
        experts = [init_expert(config, [*_seed_list(seed), 1, i]) for i in range(config.num_experts)]
        return cls(router_w, np.zeros((1, config.num_experts)), experts)

    def named_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.router.w": _arr(self.router_w), f"{prefix}.router.b": _arr(self.router_b)}
        for i, e in enumerate(self.experts):
            out.update(expert_arrays(e, f"{prefix}.expert{i}"))
        return out

    @classmethod
    def from_named(cls, params, prefix: str, num_experts: int) -> "MoecBank":
        experts = [expert_from_named(params, f"{prefix}.expert{i}") for i in range(num_experts)]
        return cls(params[f"{prefix}.router.w"], params[f"{prefix}.router.b"], experts)


def _seed_list(seed):
    return list(seed) if isinstance(seed, (list, tuple)) else [seed]


def _arr(x):
    return x.value if isinstance(x, nx.Node) else np.asarray(x)


def init_expert(config: MoecConfig, seed) -> Expert:
    rng = np.random.default_rng(_seed_list(seed))
    b_in = 1.0 / np.sqrt(config.input_dim)
    b_hid = 1.0 / np.sqrt(config.hidden_dim)
    return Expert(
        rng.uniform(-b_in, b_in, size=(config.input_dim, config.hidden_dim)),
        np.zeros((1, config.hidden_dim)),
        rng.uniform(-b_hid, b_hid, size=(config.hidden_dim, config.output_dim)),
        np.zeros((1, config.output_dim)),
    )


def expert_arrays(expert: Expert, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": _arr(getattr(expert, k)) for k in ("w1", "b1", "w2", "b2")}


def expert_from_named(params, prefix: str) -> Expert:
    return Expert(*(params[f"{prefix}.{k}"] for k in ("w1", "b1", "w2", "b2")))


@dataclass
class RouterDecision:
    logits: nx.Node
    dense_weights: nx.Node
    selected_indices: np.ndarray
    selected_weights: nx.Node

    @property
    def num_experts(self) -> int:
        return self.logits.cols

    @property
    def top_k(self) -> int:
        return self.selected_indices.shape[1]

    def utilization(self) -> np.ndarray:
        """Fraction of routing slots assigned to each expert (sums to 1)."""
        counts = np.bincount(self.selected_indices.ravel(), minlength=self.num_experts)
        return counts / self.selected_indices.size


def _check_input(features, config: MoecConfig):
    shape = features.shape if isinstance(features, nx.Node) else np.shape(features)
    if len(shape) != 2 or shape[1] != config.input_dim:
        raise ShapeError(f"features {shape} do not match input_dim={config.input_dim}")


def route(features, bank: MoecBank, config: MoecConfig) -> RouterDecision:
    _check_input(features, config)
    logits = nx.linear(features, bank.router_w, bank.router_b)
    dense = nx.softmax_rows(logits)
    idx, _ = nx.topk_rows(dense, config.top_k)
    picked = nx.take_along_rows(dense, idx)
    if config.renormalize == "softmax":
        weights = nx.softmax_rows(picked)
    else:
        weights = nx.normalize_rows(picked)
    return RouterDecision(logits, dense, idx, weights)


def expert_forward(features, expert: Expert):
    hidden = nx.gelu(nx.linear(features, expert.w1, expert.b1))
    return nx.linear(hidden, expert.w2, expert.b2)


def moec_forward(features, bank: MoecBank, config: MoecConfig):
    """Re-weighted sum of the selected experts; returns ``(hidden, decision)``."""
    decision = route(features, bank, config)
    features = decision.logits.tape.lift(features)
    n_tokens = decision.selected_indices.shape[0]
    out = None
    for e, expert in enumerate(bank.experts):
        rows, slots = np.nonzero(decision.selected_indices == e)
        if rows.size == 0:
            continue
        h = expert_forward(nx.take_rows(features, rows), expert)
        w = nx.take_elements(decision.selected_weights, rows, slots)
        part = nx.scatter_add_rows(nx.scale_rows(h, w), rows, n_tokens)
        out = part if out is None else nx.add(out, part)
    return out, decision


def balance_loss(decision: RouterDecision):
    """E * sum_e f_e * P_e with f_e the share of routing slots and P_e the mean router probability."""
    f = decision.utilization().reshape(-1, 1)
    mean_prob = nx.mean_rows(decision.dense_weights)
    return nx.scale(nx.matmul(mean_prob, f), decision.num_experts)


def z_loss(decision: RouterDecision):
    """Mean over tokens of the squared router log-sum-exp."""
    return nx.mean_all(nx.square(nx.logsumexp_rows(decision.logits)))
