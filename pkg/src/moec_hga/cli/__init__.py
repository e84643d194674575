"""Experiment configuration, runs, checkpoints and the command-line entry point."""

from .checkpoint import TrainingState, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, default_config, dumps_config, load_config, loads_config
from .runner import run_ablation_matrix, run_experiment

__all__ = [
    "ExperimentConfig",
    "TrainingState",
    "default_config",
    "dumps_config",
    "load_checkpoint",
    "load_config",
    "loads_config",
    "run_ablation_matrix",
    "run_experiment",
    "save_checkpoint",
]
