"""Bayesian finite mixture clustering for mixed continuous/categorical data.

Continuous variables may be censored at detection limits; a spike-and-slab
prior on cluster-specific parameters yields per-variable importance weights.
"""

__version__ = "0.1.0"

from .data import IngestSpec, MixedDataset, from_raw, ingest
from .evaluation import adjusted_rand_index, model_select
from .fitting import FitConfig, FitOutcome, fit
from .model import Hyperparameters, Structure, default_hyperparameters
from .simulate import ScenarioSpec, generate

__all__ = [
    "FitConfig",
    "FitOutcome",
    "Hyperparameters",
    "IngestSpec",
    "MixedDataset",
    "ScenarioSpec",
    "Structure",
    "adjusted_rand_index",
    "default_hyperparameters",
    "fit",
    "from_raw",
    "generate",
    "ingest",
    "model_select",
]
