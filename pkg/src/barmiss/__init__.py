"""Sparse Bernoulli autoregressive network estimation from thinned event data."""
from __future__ import annotations

__version__ = "0.1.0"

from .errors import BarmissError, ConfigurationError, ConvergenceError, IngestError, TaylorValidityWarning
from .filter import FilterConfig, FilterOutput, exact_forward_predictive, expected_events, filter_predict
from .ingest import ColumnMap, SplitSpec, bin_events, read_incidents, split_and_mask, top_k_nodes
from .loss import (
    LossSpec,
    brute_force_unbiased,
    grad,
    loss,
    loss_complete,
    loss_truncated,
    loss_unbiased,
    loss_unbiased_deg2,
)
from .model import EventMatrix, MissingnessSpec, NetworkModel, apply_missingness, sigmoid, simulate_bar, softplus
from .optimize import FitConfig, FitReport, fit_network, fit_row, project_l1_ball, soft_threshold
from .taylor import CoeffTable, bernoulli_numbers, partition_coeffs

__all__ = [
    "BarmissError", "ConfigurationError", "ConvergenceError", "IngestError", "TaylorValidityWarning",
    "FilterConfig", "FilterOutput", "exact_forward_predictive", "expected_events", "filter_predict",
    "ColumnMap", "SplitSpec", "bin_events", "read_incidents", "split_and_mask", "top_k_nodes",
    "LossSpec", "brute_force_unbiased", "grad", "loss", "loss_complete", "loss_truncated",
    "loss_unbiased", "loss_unbiased_deg2",
    "EventMatrix", "MissingnessSpec", "NetworkModel", "apply_missingness", "sigmoid", "simulate_bar", "softplus",
    "FitConfig", "FitReport", "fit_network", "fit_row", "project_l1_ball", "soft_threshold",
    "CoeffTable", "bernoulli_numbers", "partition_coeffs",
]
