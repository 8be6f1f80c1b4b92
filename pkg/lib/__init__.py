"""
BISCUIT Causal Representation Library

This package contains the modules for simulating interactive causal worlds,
training the BISCUIT learner on their observations, scoring identification
quality and checking identifiability conditions.
"""

from .config import ExperimentConfig, load_config
from .errors import (
    BiscuitError,
    CheckpointError,
    ConfigError,
    DatasetError,
    EvaluationError,
    NumericError,
    ShapeError,
    StageError,
)
from .metrics import (
    EvalConfig,
    MetricsReport,
    aggregate_reports,
    best_assignment,
    counterfactual_swap,
    discover_graph,
    evaluate,
    ground_truth_encoder,
    interaction_f1,
    r2_matrix,
    shd,
    write_r2_csv,
    write_report,
)
from .model import BiscuitModel, BiscuitNF, ModelConfig, TemperatureSchedule, model_from_config
from .params import ParamStore, adam_step
from .rng import RngStream
from .scm import (
    Dataset,
    ScmConfig,
    World,
    generate_dataset,
    read_dataset,
    write_dataset,
)
from .tensor import Tensor, backward, gradcheck, no_grad
from .theory import run_theory_suite
from .trainer import TrainConfig, checkpoint_load, checkpoint_save, train, train_nf
from .utils import prepare_output_dir, setup_logging, to_json, write_json

__all__ = [
    "BiscuitError",
    "CheckpointError",
    "ConfigError",
    "DatasetError",
    "EvaluationError",
    "NumericError",
    "ShapeError",
    "StageError",
    "ExperimentConfig",
    "load_config",
    "EvalConfig",
    "MetricsReport",
    "aggregate_reports",
    "best_assignment",
    "counterfactual_swap",
    "discover_graph",
    "evaluate",
    "ground_truth_encoder",
    "interaction_f1",
    "r2_matrix",
    "shd",
    "write_r2_csv",
    "write_report",
    "BiscuitModel",
    "BiscuitNF",
    "ModelConfig",
    "TemperatureSchedule",
    "model_from_config",
    "ParamStore",
    "adam_step",
    "RngStream",
    "Dataset",
    "ScmConfig",
    "World",
    "generate_dataset",
    "read_dataset",
    "write_dataset",
    "Tensor",
    "backward",
    "gradcheck",
    "no_grad",
    "run_theory_suite",
    "TrainConfig",
    "checkpoint_load",
    "checkpoint_save",
    "train",
    "train_nf",
    "prepare_output_dir",
    "setup_logging",
    "to_json",
    "write_json",
]
