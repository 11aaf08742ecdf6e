"""Correlation-regularized DQN feature learning and linear Q-learning transfer."""

from .config import ExperimentConfig, default_config, load_config
from .dqn import train
from .envs import TaskSpec
from .harness import run_trials
from .lfa import run_transfer

__all__ = ["ExperimentConfig", "TaskSpec", "default_config", "load_config", "run_transfer", "run_trials", "train"]
__version__ = "0.1.0"
