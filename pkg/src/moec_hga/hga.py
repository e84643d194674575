"""Hierarchical group attention over an appended token sequence.

Every token picks its ``M`` most similar tokens inside its own encoder
group (itself excluded) and its ``N`` most similar tokens in the other
groups.  The picks are averaged with softmax weights over their cosine
scores and blended back into the token through a fixed sigmoid gate.
Nothing here has trainable parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .encoders import GROUP_ORDER
from .errors import ConfigError, ShapeError

# column order of the "other groups" block when a group attends across groups;
# for siglip this is convnext, clip, dinov2
INTER_ORDER = ("convnext", "clip", "dinov2", "siglip")


@dataclass(frozen=True)
class HgaConfig:
    top_m: int = 3
    top_n: int = 7
    gate_slope: float = 10.0
    gate_shift: float = 0.2

    def __post_init__(self):
        if self.top_m < 1:
            raise ConfigError("top_m must be >= 1", key="top_m")
        if self.top_n < 1:
            raise ConfigError("top_n must be >= 1", key="top_n")
        if not self.gate_slope > 0:
            raise ConfigError("gate_slope must be > 0", key="gate_slope")


@dataclass
class FusedSequence:
    tokens: nx.Node
    group_offsets: list[tuple[str, int, int]]

    @property
    def total(self) -> int:
        return self.tokens.rows

    def group(self, name: str) -> tuple[int, int]:
        for g, start, length in self.group_offsets:
            if g == name:
                return start, length
        raise KeyError(name)

    def group_tokens(self, name: str) -> nx.Node:
        start, length = self.group(name)
        return nx.take_rows(self.tokens, np.arange(start, start + length))


def _ordered(hidden) -> list[tuple[str, object]]:
    items = list(hidden.items()) if isinstance(hidden, Mapping) else list(hidden)
    rank = {name: i for i, name in enumerate(GROUP_ORDER)}
    return sorted(items, key=lambda kv: rank.get(kv[0], len(rank)))


def sequence_append(hidden) -> FusedSequence:
    """Stack per-group token matrices along the token axis.

    ``hidden`` maps group name to a ``tokens x D`` matrix; known groups are
    placed in siglip, dinov2, convnext, clip order.
    """
    items = _ordered(hidden)
    if not items:
        raise ShapeError("sequence_append: no groups given")
    widths = {(m.cols if isinstance(m, nx.Node) else np.shape(m)[1]) for _, m in items}
    if len(widths) != 1:
        raise ShapeError(f"sequence_append: groups disagree on channel dim {sorted(widths)}")
    offsets, start = [], 0
    for name, m in items:
        n = m.rows if isinstance(m, nx.Node) else np.shape(m)[0]
        offsets.append((name, start, n))
        start += n
    if len(items) == 1:
        m = items[0][1]
        tokens = m if isinstance(m, nx.Node) else nx.Tape().constant(m)
    else:
        tokens = nx.concat_rows([m for _, m in items])
    return FusedSequence(tokens, offsets)


def intra_group_select(group, m: int):
    """Top-``m`` neighbours of each token inside its group, self excluded.

    Returns ``(local_indices, scores)``; for groups with fewer than two
    tokens the index array is empty and ``scores`` is ``None``.
    """
    g = group.rows if isinstance(group, nx.Node) else np.shape(group)[0]
    k = min(m, g - 1)
    if k < 1:
        return np.zeros((g, 0), dtype=np.intp), None
    sim = nx.cosine_sim(group, group)
    masked = nx.mul(sim, 1.0 - np.eye(g))
    candidates = np.array(masked.value)
    np.fill_diagonal(candidates, -np.inf)
    idx, _ = nx.topk_rows(candidates, k)
    return idx, nx.take_along_rows(masked, idx)


def inter_group_select(query, others, n: int, global_index: Sequence[int] | None = None):
    """Top-``n`` tokens of ``others`` for each query token.

    ``global_index[j]`` is the sequence position of row ``j`` of ``others``;
    returned indices are translated through it.
    """
    sim = nx.cosine_sim(query, others)
    k = min(n, sim.cols)
    idx, _ = nx.topk_rows(sim, k)
    scores = nx.take_along_rows(sim, idx)
    if global_index is not None:
        idx = np.asarray(global_index, dtype=np.intp)[idx]
    return idx, scores


@dataclass
class GroupSelection:
    group_name: str
    start: int
    length: int
    intra_indices: np.ndarray  # sequence positions, length x m
    intra_scores: nx.Node | None
    inter_indices: np.ndarray  # sequence positions, length x n
    inter_scores: nx.Node | None

    @property
    def degenerate(self) -> bool:
        return self.intra_scores is None


def select(seq: FusedSequence, config: HgaConfig) -> list[GroupSelection]:
    rank = {name: i for i, name in enumerate(INTER_ORDER)}
    selections = []
    for name, start, length in seq.group_offsets:
        group = seq.group_tokens(name)
        local, intra_scores = intra_group_select(group, config.top_m)
        others = sorted(
            (o for o in seq.group_offsets if o[0] != name),
            key=lambda o: rank.get(o[0], len(rank)),
        )
        if others:
            positions = np.concatenate([np.arange(s, s + n) for _, s, n in others])
            other_tokens = nx.take_rows(seq.tokens, positions)
            inter_idx, inter_scores = inter_group_select(group, other_tokens, config.top_n, positions)
        else:
            inter_idx, inter_scores = np.zeros((length, 0), dtype=np.intp), None
        selections.append(
            GroupSelection(name, start, length, local + start, intra_scores, inter_idx, inter_scores)
        )
    return selections


def aggregate(seq: FusedSequence, selections: list[GroupSelection]) -> nx.Node:
    """Softmax-weighted mean of each token's selected tokens (joint over intra and inter picks)."""
    x = seq.tokens
    rows = []
    for sel in selections:
        scores = [s for s in (sel.intra_scores, sel.inter_scores) if s is not None]
        if not scores:
            rows.append(nx.take_rows(x, np.arange(sel.start, sel.start + sel.length)))
            continue
        idx = np.hstack([sel.intra_indices, sel.inter_indices])
        joint = scores[0] if len(scores) == 1 else nx.concat_cols(scores)
        weights = nx.place_along_rows(nx.softmax_rows(joint), idx, seq.total)
        rows.append(nx.matmul(weights, x))
    return rows[0] if len(rows) == 1 else nx.concat_rows(rows)


def adaptive_gate(x_in, x_agg, config: HgaConfig) -> nx.Node:
    """(1 - gate) * x_in + gate * x_agg, gate = sigmoid(slope * (x_agg - x_in - shift)), elementwise."""
    return nx.gated_blend(x_in, x_agg, config.gate_slope, config.gate_shift)


def hga_forward(seq: FusedSequence, config: HgaConfig):
    """Returns ``(x_out, selections, x_agg)``."""
    selections = select(seq, config)
    agg = aggregate(seq, selections)
    out = adaptive_gate(seq.tokens, agg, config)
    return FusedSequence(out, list(seq.group_offsets)), selections, agg
