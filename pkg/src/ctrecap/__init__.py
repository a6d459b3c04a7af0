"""Continuous-time multi-state capture-recapture models as hidden Markov models."""

from .data import (
    DataSummary,
    EncounterData,
    EncounterHistory,
    FormatError,
    OccasionGrid,
    ValidationError,
    parse_encounter_data,
    summarize,
    write_encounter_data,
)
from .decode import DecodedPath, decode, state_probabilities, viterbi
from .inference import (
    FitOptions,
    FitResult,
    IntervalSweepResult,
    default_init,
    fit,
    interval_sweep,
    mc_intensity_bands,
    wald_intervals,
)
from .likelihood import (
    individual_loglik_bruteforce,
    individual_loglik_forward,
    total_loglik,
)
from .linalg import IntensityMatrix, TransitionMatrix, matrix_exponential, mean_sojourn_time
from .model import (
    ModelSpec,
    ParamVector,
    intensity_at,
    natural_parameters,
    params_from_natural,
    transition_matrix_between,
)
from .simulate import SimConfig, simulate_dataset

__version__ = "0.1.0"

__all__ = [
    "DataSummary",
    "DecodedPath",
    "EncounterData",
    "EncounterHistory",
    "FitOptions",
    "FitResult",
    "FormatError",
    "IntensityMatrix",
    "IntervalSweepResult",
    "ModelSpec",
    "OccasionGrid",
    "ParamVector",
    "SimConfig",
    "TransitionMatrix",
    "ValidationError",
    "decode",
    "default_init",
    "fit",
    "individual_loglik_bruteforce",
    "individual_loglik_forward",
    "intensity_at",
    "interval_sweep",
    "matrix_exponential",
    "mc_intensity_bands",
    "mean_sojourn_time",
    "natural_parameters",
    "params_from_natural",
    "parse_encounter_data",
    "simulate_dataset",
    "state_probabilities",
    "summarize",
    "total_loglik",
    "transition_matrix_between",
    "viterbi",
    "wald_intervals",
    "write_encounter_data",
]
