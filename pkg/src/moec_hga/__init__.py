"""Sparse mixture-of-experts connectors and hierarchical group attention on a small autodiff kernel."""

from .encoders import EncoderSpec, FeatureStream, generate_stream, standardize_channels
from .hga import FusedSequence, HgaConfig, adaptive_gate, aggregate, hga_forward, sequence_append
from .moec import MoecBank, MoecConfig, RouterDecision, balance_loss, moec_forward, route, z_loss
from .pipeline import (
    LossReport,
    ModelConfig,
    TaskSpec,
    desk_config,
    flops_estimate,
    forward,
    gradient_check,
    init_params,
    tiny_config,
    train_step,
)

__version__ = "0.1.0"
