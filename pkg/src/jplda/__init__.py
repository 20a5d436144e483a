"""PLDA back-ends (simple, full, tied, joint) for verification with condition nuisance.

The joint model ties a condition latent across every sample recorded in the
same condition, in addition to the usual speaker latent::

    m_i = mu + V y_{s_i} + U x_{c_i} + z_i,   z_i ~ N(0, D^-1)
"""
from .data import (LabeledDataset, PldaParams, ScoreSet, TiedPldaParams, TrialList, read_dataset, read_model,
                   read_scores, read_trials, write_dataset, write_model, write_scores, write_trials)
from .errors import DataError, NumericalError, PldaError
from .joint import ConditionPriors

__version__ = "0.1.0"

__all__ = [
    "ConditionPriors", "DataError", "LabeledDataset", "NumericalError", "PldaError", "PldaParams", "ScoreSet",
    "TiedPldaParams", "TrialList", "read_dataset", "read_model", "read_scores", "read_trials", "write_dataset",
    "write_model", "write_scores", "write_trials",
]
