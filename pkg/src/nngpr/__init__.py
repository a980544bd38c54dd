"""Gaussian process regression with an infinitely wide ReLU network kernel for
combining gridded climate-model ensembles, plus baselines and verification."""

__version__ = "0.1.0"

from .errors import (CompatibilityError, ConfigError, DataError, FormatError, NNGPRError,
                     NumericalError, PartialFailure)
from .gridstore import FieldSeries, GridField, GridSpec, Manifest, TrainingSet
from .kernel import KernelParams, kernel_matrix, kernel_value
from .gpr import FitState, ModelParams, OptimizerSettings, fit, predict, predict_series

__all__ = [
    "CompatibilityError", "ConfigError", "DataError", "FormatError", "NNGPRError",
    "NumericalError", "PartialFailure", "FieldSeries", "GridField", "GridSpec", "Manifest",
    "TrainingSet", "KernelParams", "kernel_matrix", "kernel_value", "FitState", "ModelParams",
    "OptimizerSettings", "fit", "predict", "predict_series",
]
