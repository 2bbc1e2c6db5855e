"""Data-augmentation algorithms (EM family and MCMC samplers) for Poisson
spectral models and analytic Gaussian test problems."""

from .counts import AugExpectations, AugmentedCounts
from .em import (AugLevel, CmStep, EmOptions, NonMonotoneError, OrderingError, RateEstimate,
                 Trace, estimate_rate, run_aecm, run_cda_em, run_ecm, run_ecme, run_em,
                 run_mcem, run_nested_em, run_pxem, validate_ordering)
from .spectral import (Absorption, DeltaLine, EnergyGrid, FreeContinuum, GaussianLine,
                       ObservedSpectrum, PowerLaw, ResponseMatrix, SpectralParams,
                       bin_intensity, expected_counts, line_bin_probs, observed_loglik,
                       simulate_spectrum)
from .augmentation import WorkingAugmentation, e_step_full, impute_full
from .fitting import SpectralProblem, SpectralSampler

__all__ = [
    "AugExpectations", "AugmentedCounts", "AugLevel", "CmStep", "EmOptions", "NonMonotoneError",
    "OrderingError", "RateEstimate", "Trace", "estimate_rate", "run_aecm", "run_cda_em",
    "run_ecm", "run_ecme", "run_em", "run_mcem", "run_nested_em", "run_pxem",
    "validate_ordering", "Absorption", "DeltaLine", "EnergyGrid", "FreeContinuum",
    "GaussianLine", "ObservedSpectrum", "PowerLaw", "ResponseMatrix", "SpectralParams",
    "bin_intensity", "expected_counts", "line_bin_probs", "observed_loglik",
    "simulate_spectrum", "WorkingAugmentation", "e_step_full", "impute_full",
    "SpectralProblem", "SpectralSampler",
]
