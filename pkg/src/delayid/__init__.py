"""Sparse Bayesian identification of delay differential equations with an unknown constant delay."""

from .basis import CandidateCatalog, LibraryBuilder, correlation_screen, evaluate_library, parse_term
from .dde_core import SparseDelayModel, TermDescriptor, TermKind, TrajectoryData, WeightedTerm, simulate
from .gibbs import Hyperparameters, SamplerConfig, run_chain
from .posterior import PosteriorSummary, parameter_error, summarize, to_model
from .predictor import phase_portrait, predict, predict_with_uncertainty
from .signal_prep import FilterSpec, NoiseSpec, add_noise, prepare

__version__ = "0.1.0"

__all__ = [
    "CandidateCatalog", "FilterSpec", "Hyperparameters", "LibraryBuilder", "NoiseSpec", "PosteriorSummary",
    "SamplerConfig", "SparseDelayModel", "TermDescriptor", "TermKind", "TrajectoryData", "WeightedTerm",
    "add_noise", "correlation_screen", "evaluate_library", "parameter_error", "parse_term", "phase_portrait",
    "predict", "predict_with_uncertainty", "prepare", "run_chain", "simulate", "summarize", "to_model",
]
