"""Desk-scale simulator of backdoor attacks and defenses in federated
contrastive learning."""

__version__ = "0.1.0"

from .attack import AttackConfig, Schedule, TargetSpec, backdoor_loss, build_attacker_roster, malicious_local_train
from .config import ConfigError, ExperimentConfig, list_presets, parse_config, preset
from .contrastive import ContrastiveConfig, benign_local_train, info_nce_loss
from .data import Dataset, Trigger, default_trigger, generate_synthetic, load_dataset, partition, save_dataset
from .defense import DefenseSpec, apply_defense, foolsgold_weights
from .evaluation import Evaluator, ProbeConfig, knn_eval, linear_probe
from .federation import FederationConfig, Simulation, aggregate, run_experiment, run_round
from .model import ModelArch
from .numcore import ParamVector, RngStream

__all__ = [
    "AttackConfig", "ConfigError", "ContrastiveConfig", "Dataset", "DefenseSpec", "Evaluator",
    "ExperimentConfig", "FederationConfig", "ModelArch", "ParamVector", "ProbeConfig", "RngStream",
    "Schedule", "Simulation", "TargetSpec", "Trigger", "aggregate", "apply_defense", "backdoor_loss",
    "benign_local_train", "build_attacker_roster", "default_trigger", "foolsgold_weights",
    "generate_synthetic", "info_nce_loss", "knn_eval", "linear_probe", "list_presets", "load_dataset",
    "malicious_local_train", "parse_config", "partition", "preset", "run_experiment", "run_round",
    "save_dataset",
]
