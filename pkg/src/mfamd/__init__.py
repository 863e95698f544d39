"""Bayesian clustering of mixed continuous, binary and nominal data with a
mixture of factor analyzers fitted by data-augmented Gibbs sampling."""

__version__ = "0.1.0"

from .data import Kind, MixedDataset, VariableSpec, load_csv, read_schema
from .diagnostics import adjusted_rand_index, membership_summary, rand_index
from .fit import FitResult, fit
from .sampler import DegenerateModel, MCMCState, PhaseSchedule, Priors, gibbs_sweep, init_state
from .select import grid_search
from .simulate import TrueModel, default_scenario, generate
from .store import PosteriorSamples, load_samples, save_samples
from .varsel import VarSelConfig

__all__ = [
    "DegenerateModel",
    "FitResult",
    "Kind",
    "MCMCState",
    "MixedDataset",
    "PhaseSchedule",
    "PosteriorSamples",
    "Priors",
    "TrueModel",
    "VarSelConfig",
    "VariableSpec",
    "adjusted_rand_index",
    "default_scenario",
    "fit",
    "generate",
    "gibbs_sweep",
    "grid_search",
    "init_state",
    "load_csv",
    "load_samples",
    "membership_summary",
    "rand_index",
    "read_schema",
    "save_samples",
    "__version__",
]
