"""Batched policy search through Gaussian-process dynamics models.

Modules:
    autodiff   reverse-mode tape over numpy arrays
    data       transition logs, CSV I/O and normalization
    gp         SE-ARD GP regression, hyperparameter fitting, predictive caches
    policy     tanh MLP policies
    trainer    batched reparameterized rollouts and the Adam training loop
    env        simulated hydraulic boom (data source and evaluation plant)
    bench      timing sweeps and learning-curve comparisons
    serialize  model and policy files
    config     flat key = value run configuration
    cli        command-line driver
"""
from .autodiff import Tape, grad_check
from .data import Normalizer, TransitionDataset, build_training_pairs, fit_normalizer, load_csv, write_csv
from .env import BoomParams, PlantState, collect_excitation_data, evaluate_policy
from .gp import FitConfig, GpEnsemble, Hyperparams, build_cache, fit_hyperparams, predict
from .optim import AdamState, adam_step
from .policy import MlpPolicy, act, make_policy
from .trainer import RewardParams, TrainConfig, reward, rollout_batch, train_policy, trajectory_return

__version__ = "0.1.0"

__all__ = [
    "Tape", "grad_check",
    "Normalizer", "TransitionDataset", "build_training_pairs", "fit_normalizer", "load_csv", "write_csv",
    "BoomParams", "PlantState", "collect_excitation_data", "evaluate_policy",
    "FitConfig", "GpEnsemble", "Hyperparams", "build_cache", "fit_hyperparams", "predict",
    "AdamState", "adam_step",
    "MlpPolicy", "act", "make_policy",
    "RewardParams", "TrainConfig", "reward", "rollout_batch", "train_policy", "trajectory_return",
]
