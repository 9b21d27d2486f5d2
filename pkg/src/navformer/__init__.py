"""Recurrent transformer agent for instruction-guided navigation on graphs."""

from .autodiff import Tensor, backward, no_grad
from .model import ModelConfig, ModelParams
from .agent import NavigationAgent, make_agent
from .envsim import EpisodeSuite, generate_environment, load_suite, make_suite, save_suite
from .training import TrainConfig, Trainer
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Tensor", "backward", "no_grad",
    "ModelConfig", "ModelParams",
    "NavigationAgent", "make_agent",
    "EpisodeSuite", "generate_environment", "make_suite", "load_suite", "save_suite",
    "TrainConfig", "Trainer",
    "load_checkpoint", "save_checkpoint",
]

__version__ = "0.1.0"
