"""Adversarially robust deep compressed sensing with a trust-region inner solver."""

__version__ = "0.1.0"

from .attack import evaluate_model, omni_attack
from .estimators import DCSATGenerator, LatentAutoencoder
from .network import GeneratorNet, init_generator
from .sensing import SamplingMatrix, make_sampler
from .training import TrainConfig, ablation_sweep, finetune_dcsat, train_autoencoder
from .trustregion import solve_inner_max

__all__ = [
    "DCSATGenerator",
    "GeneratorNet",
    "LatentAutoencoder",
    "SamplingMatrix",
    "TrainConfig",
    "ablation_sweep",
    "evaluate_model",
    "finetune_dcsat",
    "init_generator",
    "make_sampler",
    "omni_attack",
    "solve_inner_max",
    "train_autoencoder",
]
