"""Reduced-dimension variational GP surrogates for robust design optimisation."""

from .data import InputSpec, TrainingSet, read_dataset, write_dataset
from .errors import ConfigError, EvaluationError, MetricUndefinedError, NumericalError, RDVGPError, TrainingError
from .model import RDVGPModel, marginal_predictive, predictive_conditional
from .trainer import TrainConfig, TrainReport, ard_select, train

__version__ = "0.1.0"
