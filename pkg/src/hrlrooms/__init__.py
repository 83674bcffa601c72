"""Hierarchical reinforcement learning with unsupervised subgoal discovery on grid worlds."""
from ._accel import backend_name
from .env import GridPos, Layout, Variant, generate_layout, reset, step
from .trainer import (ConfigError, TrainConfig, evaluate, run_baseline, run_intrinsic_pretraining,
                      run_random_walk, run_unified)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "GridPos", "Layout", "TrainConfig", "Variant", "backend_name", "evaluate",
    "generate_layout", "reset", "run_baseline", "run_intrinsic_pretraining", "run_random_walk",
    "run_unified", "step",
]
