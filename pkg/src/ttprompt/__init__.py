"""Tensor-train missing-aware prompts for incomplete multi-view, multi-label,
class-incremental learning.

The package is organised as:

* :mod:`ttprompt.numcore` -- seeded RNG streams, parameter tensors, Adam,
  finite differences.
* :mod:`ttprompt.ept` -- the factorized prompt bank and its dense/per-view
  comparison banks, plus parameter accounting.
* :mod:`ttprompt.dcl` -- the overlap-driven contrastive regularizer.
* :mod:`ttprompt.model` -- view encoders, frozen backbone with prompt
  injection, task heads and the training loss.
* :mod:`ttprompt.incremental` -- sessions, missing-view simulation, training,
  inference and metrics.
* :mod:`ttprompt.cli` -- the ``ttprompt`` command.
"""
from .config import ExperimentConfig, load_config
from .data import Dataset, SyntheticSpec, gen_data, load_dataset, save_dataset
from .dcl import build_pairs, dcl_loss
from .ept import EptBank, make_bank, param_count, tt_coefficients
from .errors import CapacityError, ConfigError, NumericalError, ShapeError, ValidationError
from .incremental import evaluate, infer, partition_classes, run_experiment, simulate_missing, train_session
from .kernels import backend_name, use_backend
from .model import ModelConfig, PromptModel
from .numcore import ParamTensor, Rng, adam_step

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "ConfigError", "Dataset", "EptBank", "ExperimentConfig", "ModelConfig",
    "NumericalError", "ParamTensor", "PromptModel", "Rng", "ShapeError", "SyntheticSpec",
    "ValidationError", "adam_step", "backend_name", "build_pairs", "dcl_loss", "evaluate",
    "gen_data", "infer", "load_config", "load_dataset", "make_bank", "param_count",
    "partition_classes", "run_experiment", "save_dataset", "simulate_missing", "train_session",
    "tt_coefficients", "use_backend",
]
