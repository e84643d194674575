"""Synthetic stand-ins for the four vision encoder streams.

Each stream is a ``tokens x channels`` matrix.  All groups share a planted
low-rank factor: token ``j`` of every group is driven by the latent code of
"part" ``j % parts``, mapped through a loading matrix that is common to all
groups up to a small per-group perturbation.  Tokens built from the same
part are therefore more similar across groups than tokens from different
parts, which gives cross-group selection something real to find.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

GROUP_ORDER = ("siglip", "dinov2", "convnext", "clip")

# token counts recovered from the cumulative totals 440 / 540 / 1116 / 1692
FULL_SCALE_TOKEN_COUNTS = {"siglip": 440, "dinov2": 576, "convnext": 100, "clip": 576}

# (offset, scale) per group; heterogeneous magnitudes on purpose
GROUP_STATS = {
    "siglip": (0.0, 1.0),
    "dinov2": (0.4, 1.8),
    "convnext": (-0.3, 0.6),
    "clip": (0.2, 2.5),
}


@dataclass(frozen=True)
class EncoderSpec:
    group_name: str
    token_count: int
    channel_dim: int
    needs_channel_pooling: bool = False
    seed: int = 0
    pooled_dim: int | None = None

    def __post_init__(self):
        if self.token_count < 1:
            raise ConfigError(f"token_count must be >= 1, got {self.token_count}", key="tokens")
        if self.channel_dim < 1:
            raise ConfigError(f"channel_dim must be >= 1, got {self.channel_dim}", key="channels")
        if self.needs_channel_pooling:
            target = self.target_dim
            if target < 1 or self.channel_dim % target:
                raise ConfigError(
                    f"{self.group_name}: {self.channel_dim} channels cannot be pooled to {target}",
                    key="pooled_dim",
                )

    @property
    def target_dim(self) -> int:
        """Channel count after standardisation."""
        if not self.needs_channel_pooling:
            return self.channel_dim
        return self.pooled_dim if self.pooled_dim is not None else self.channel_dim


@dataclass(frozen=True)
class FeatureStream:
    spec: EncoderSpec
    features: np.ndarray

    def __post_init__(self):
        expected = (self.spec.token_count, self.features.shape[1] if self.features.ndim == 2 else -1)
        if self.features.ndim != 2 or self.features.shape[0] != self.spec.token_count:
            raise ConfigError(
                f"{self.spec.group_name}: features {self.features.shape} do not match spec {expected}"
            )
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"{self.spec.group_name}: non-finite features")

    @property
    def group_name(self) -> str:
        return self.spec.group_name


def default_specs(
    channel_dim: int = 16,
    token_counts: dict[str, int] | None = None,
    pooling_factor: int = 4,
) -> tuple[EncoderSpec, ...]:
    """The four-group layout: full-scale token counts, ConvNeXt pooled down to ``channel_dim``."""
    counts = dict(FULL_SCALE_TOKEN_COUNTS)
    if token_counts:
        counts.update(token_counts)
    specs = []
    for i, name in enumerate(GROUP_ORDER):
        if name == "convnext":
            specs.append(EncoderSpec(name, counts[name], channel_dim * pooling_factor, True, i + 1, channel_dim))
        else:
            specs.append(EncoderSpec(name, counts[name], channel_dim, False, i + 1))
    return tuple(specs)


def _group_stats(spec: EncoderSpec) -> tuple[float, float]:
    if spec.group_name in GROUP_STATS:
        return GROUP_STATS[spec.group_name]
    rng = np.random.default_rng([7919, spec.seed])
    return float(rng.uniform(-0.5, 0.5)), float(rng.uniform(0.5, 2.5))


def _loadings(spec: EncoderSpec, rank: int, loading_seed: int) -> np.ndarray:
    base_dim = spec.target_dim
    shared = np.random.default_rng([loading_seed, 0, base_dim]).normal(size=(rank, base_dim))
    shared /= np.sqrt(rank)
    own = np.random.default_rng([loading_seed, 1, spec.seed])
    loading = shared + 0.1 * own.normal(size=shared.shape)
    if spec.needs_channel_pooling:
        r = spec.channel_dim // base_dim
        # each pooled block averages back to the shared loading plus block noise
        loading = np.repeat(loading, r, axis=1) + 0.3 * own.normal(size=(rank, spec.channel_dim))
    return loading


def generate_stream(
    spec: EncoderSpec,
    seed: int,
    codes: np.ndarray | None = None,
    *,
    rank: int = 4,
    parts: int = 8,
    token_noise: float = 0.3,
    view_noise: float = 0.0,
    loading_seed: int = 0,
) -> FeatureStream:
    """Deterministic synthetic features for one encoder group.

    ``codes`` is a ``parts x rank`` matrix of latent part codes; when omitted
    it is drawn from ``seed`` alone, so every group generated with the same
    seed shares it.  ``view_noise`` adds one rank-dimensional perturbation
    per (group, seed) on top of the shared codes.
    """
    if codes is None:
        codes = np.random.default_rng([seed, 0]).normal(size=(parts, rank))
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 2 or codes.shape[1] != rank:
        raise ValueError(f"codes must be parts x {rank}, got {codes.shape}")
    noise_rng = np.random.default_rng([seed, 1, spec.seed])
    view = view_noise * noise_rng.normal(size=(1, rank))
    latent = codes[np.arange(spec.token_count) % codes.shape[0]] + view
    offset, scale = _group_stats(spec)
    signal = latent @ _loadings(spec, rank, loading_seed)
    features = scale * (signal + token_noise * noise_rng.normal(size=signal.shape)) + offset
    return FeatureStream(spec, features)


def standardize_channels(stream: FeatureStream, target_dim: int) -> FeatureStream:
    """Average-pool contiguous channel blocks down to ``target_dim`` channels."""
    c = stream.features.shape[1]
    if target_dim < 1 or target_dim > c or c % target_dim:
        raise ConfigError(
            f"{stream.group_name}: cannot pool {c} channels to {target_dim} without interpolation"
        )
    r = c // target_dim
    if r == 1:
        return stream
    pooled = stream.features.reshape(stream.features.shape[0], target_dim, r).mean(axis=2)
    spec = EncoderSpec(
        stream.spec.group_name, stream.spec.token_count, target_dim, False, stream.spec.seed
    )
    return FeatureStream(spec, pooled)
