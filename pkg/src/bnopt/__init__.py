"""Bayesian optimization over mixed spaces with branching and nested hyperparameters."""

__version__ = "0.1.0"

from .acquisition import AcqOptions, expected_improvement, propose, propose_batch
from .gp import Dataset, FitOptions, fit, posterior
from .kernel import BACKEND, KernelParams
from .loop import ProtocolError, Study
from .sensitivity import interaction_effect, main_effect
from .space import (
    BranchVar,
    Configuration,
    NestedVar,
    QuantVar,
    SearchSpace,
    enumerate_categorical_combos,
    sample_initial_design,
    validate,
)
