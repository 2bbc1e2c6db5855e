"""Conditional expectations and draws of the latent photon counts.

Each level of the hierarchy is inverted by Bayes' rule:

* background removal:  ``Y+_i | Y_i ~ Bin(Y_i, (xi_i - b_i) / xi_i)``
* deblurring:          photons in detector bin ``i`` came from ideal bin ``j``
  with probability proportional to ``M_ij lambda'_j``; photons blurred off the
  detector are an extra unobserved Poisson cell
* source splitting:    ``Y.L_j | Y.+_j ~ Bin(Y.+_j, nu p_j / lambda_j)``
* absorbed photons:    ``Y..s_j = Y.s_j + Poisson(lambda^s_j (1 - d_j g_j - a_j))``

``a_j`` is the working absorption rate of a reduced augmentation.  With
``a_j = 0`` every absorbed photon is imputed; a positive ``a_j`` only restores
enough photons to equalise absorption, and the restored counts are then
``Poisson((1 - a_j) lambda_j)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .counts import AugExpectations, AugmentedCounts
from .spectral import (DomainError, EnergyGrid, ObservedSpectrum, ResponseMatrix,
                       SpectralError, SpectralParams, background_of, continuum_intensity,
                       expected_counts, line_bin_probs, line_intensity, transmission)

LINE_SUPPORT_TOL = 1e-6
LEVELS = ("background", "deblur", "split", "restore")


class PreconditionError(SpectralError):
    """Working augmentation is not legal for the current parameters."""


@dataclass(frozen=True)
class WorkingAugmentation:
    """Working absorption rates for the reduced augmentation.

    ``line_a_min`` applies to line photons and ``continuum_a_min`` to
    continuum photons.  Both must not exceed the absorption rate
    ``1 - d_j g_j`` anywhere on the relevant support; outside the line
    support the rate is capped bin by bin.
    """

    line_a_min: float = 0.0
    continuum_a_min: float = 0.0

    def __post_init__(self):
        for a in (self.line_a_min, self.continuum_a_min):
            if not 0.0 <= a < 1.0:
                raise PreconditionError("a_min must lie in [0, 1)")

    @classmethod
    def auto(cls, params: SpectralParams, grid: EnergyGrid,
             continuum: bool = False) -> "WorkingAugmentation":
        """Largest legal rates at ``params``: the lowest absorption rate over
        the line support (bins with ``p_j > 1e-6``) and, if requested, over
        the whole grid for the continuum."""
        absorbed = 1.0 - transmission(params.absorption, grid)
        line_a = 0.0
        if params.line is not None:
            support = line_support(params, grid)
            if support.any():
                line_a = float(absorbed[support].min())
        cont_a = float(absorbed.min()) if continuum else 0.0
        # Rates of exactly one (dead bins) are not legal working values.
        cap = np.nextafter(1.0, 0.0)
        return cls(max(0.0, min(line_a, cap)), max(0.0, min(cont_a, cap)))

    def rates(self, params: SpectralParams, grid: EnergyGrid) -> tuple[np.ndarray, np.ndarray]:
        """Per-bin working rates ``(a_continuum, a_line)``; raises if illegal."""
        absorbed = 1.0 - transmission(params.absorption, grid)
        tol = 1e-12
        if self.continuum_a_min > 0 and np.any(self.continuum_a_min > absorbed + tol):
            raise PreconditionError("continuum a_min exceeds an absorption rate")
        if self.line_a_min > 0 and params.line is not None:
            support = line_support(params, grid)
            if np.any(self.line_a_min > absorbed[support] + tol):
                raise PreconditionError("line a_min exceeds an absorption rate on the line support")
        a_c = np.minimum(self.continuum_a_min, absorbed)
        a_l = np.minimum(self.line_a_min, absorbed)
        return np.maximum(a_c, 0.0), np.maximum(a_l, 0.0)


FULL_AUGMENTATION = WorkingAugmentation()


def line_support(params: SpectralParams, grid: EnergyGrid) -> np.ndarray:
    return line_bin_probs(params.line, grid) > LINE_SUPPORT_TOL


def level_rngs(seed) -> dict:
    """Independent counter-based generators, one per hierarchy level."""
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seqs = root.spawn(len(LEVELS))
    return {name: np.random.Generator(np.random.Philox(s)) for name, s in zip(LEVELS, seqs)}


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def _check_mode(mode):
    if mode not in ("expect", "draw"):
        raise ValueError(f"mode must be 'expect' or 'draw', got {mode!r}")


def strip_background(params: SpectralParams, grid: EnergyGrid, rsp: ResponseMatrix,
                     data: ObservedSpectrum, mode: str = "expect", seed=None,
                     xi: np.ndarray = None) -> np.ndarray:
    """Source counts in each detector bin with the background removed."""
    _check_mode(mode)
    if xi is None:
        xi = expected_counts(params, grid, rsp)
    bkg = background_of(params, grid)
    y = data.counts
    if np.any(bkg > xi * (1 + 1e-12)):
        raise SpectralError("background exceeds the expected counts")
    if np.any((xi <= 0) & (y > 0)):
        raise DomainError("zero expected counts in a bin with observed counts")
    frac = np.divide(xi - bkg, xi, out=np.zeros_like(xi), where=xi > 0)
    frac = np.clip(frac, 0.0, 1.0)
    if mode == "expect":
        return y * frac
    return _rng(seed).binomial(y, frac)


def deblur(params: SpectralParams, grid: EnergyGrid, rsp: ResponseMatrix,
           y_plus: np.ndarray, mode: str = "expect", seed=None) -> np.ndarray:
    """Photon counts per ideal bin after absorption, before blurring."""
    _check_mode(mode)
    lam = (continuum_intensity(params.continuum, grid) + line_intensity(params.line, grid)) \
        * transmission(params.absorption, grid)
    folded = rsp.matvec(lam)
    y_plus = np.asarray(y_plus)
    if np.any((folded <= 0) & (y_plus > 0)):
        raise DomainError("zero source intensity in a detector bin with counts")
    unseen = lam * rsp.lost
    if mode == "expect":
        ratio = np.divide(y_plus, folded, out=np.zeros(folded.shape), where=folded > 0)
        return lam * rsp.rmatvec(ratio) + unseen
    rng = _rng(seed)
    probs = rsp.dense * lam[None, :]
    rows = probs.sum(axis=1)
    probs = np.divide(probs, rows[:, None], out=np.full(probs.shape, 1.0 / probs.shape[1]),
                      where=rows[:, None] > 0)
    seen = rng.multinomial(np.asarray(y_plus, dtype=np.int64), probs).sum(axis=0)
    return seen + rng.poisson(unseen)


def split_sources(params: SpectralParams, grid: EnergyGrid, ydot_plus: np.ndarray,
                  mode: str = "expect", seed=None) -> tuple[np.ndarray, np.ndarray]:
    """Split ideal-bin counts into ``(continuum, line)`` parts."""
    _check_mode(mode)
    lam_c = continuum_intensity(params.continuum, grid)
    lam_l = line_intensity(params.line, grid)
    total = lam_c + lam_l
    ydot_plus = np.asarray(ydot_plus)
    if np.any((total <= 0) & (ydot_plus > 0)):
        raise DomainError("zero intensity in a bin with counts")
    frac = np.clip(np.divide(lam_l, total, out=np.zeros_like(total), where=total > 0), 0.0, 1.0)
    if mode == "expect":
        line = ydot_plus * frac
    else:
        line = _rng(seed).binomial(ydot_plus, frac)
    return ydot_plus - line, line


def restore_absorbed(params: SpectralParams, grid: EnergyGrid, ydot_c: np.ndarray,
                     ydot_l: np.ndarray, working: WorkingAugmentation = FULL_AUGMENTATION,
                     mode: str = "expect", seed=None):
    """Add back absorbed photons.

    Returns ``(yddot_c, yddot_l, scale_c, scale_l)`` where the restored
    counts are ``Poisson(scale * lambda)`` given the parameters.
    """
    _check_mode(mode)
    a_c, a_l = working.rates(params, grid)
    keep = transmission(params.absorption, grid)
    eta_c = continuum_intensity(params.continuum, grid) * np.maximum(1.0 - keep - a_c, 0.0)
    eta_l = line_intensity(params.line, grid) * np.maximum(1.0 - keep - a_l, 0.0)
    if mode == "expect":
        return ydot_c + eta_c, ydot_l + eta_l, 1.0 - a_c, 1.0 - a_l
    rng = _rng(seed)
    return ydot_c + rng.poisson(eta_c), ydot_l + rng.poisson(eta_l), 1.0 - a_c, 1.0 - a_l


def outer_expectation(params: SpectralParams, grid: EnergyGrid, rsp: ResponseMatrix,
                      data: ObservedSpectrum, xi: np.ndarray = None) -> tuple[np.ndarray, np.ndarray]:
    """Expected level-5 and level-4 counts: ``(E[Y+], E[Y.+])``."""
    y_plus = strip_background(params, grid, rsp, data, "expect", xi=xi)
    return y_plus, deblur(params, grid, rsp, y_plus, "expect")


def inner_expectations(params: SpectralParams, grid: EnergyGrid, ydot_plus: np.ndarray,
                       working: WorkingAugmentation = FULL_AUGMENTATION,
                       y_plus: np.ndarray = None) -> AugExpectations:
    """Expectations of levels 3 and 2 given (expected) level-4 counts."""
    # Same formulas as split_sources and restore_absorbed in expect mode,
    # sharing the intensities.
    lam_c = continuum_intensity(params.continuum, grid)
    lam_l = line_intensity(params.line, grid)
    total = lam_c + lam_l
    ydot_plus = np.asarray(ydot_plus, dtype=float)
    if np.any((total <= 0) & (ydot_plus > 0)):
        raise DomainError("zero intensity in a bin with counts")
    frac = np.divide(lam_l, total, out=np.zeros_like(total), where=total > 0)
    ydot_l = ydot_plus * np.clip(frac, 0.0, 1.0)
    ydot_c = ydot_plus - ydot_l
    keep = transmission(params.absorption, grid)
    lost = 1.0 - keep
    if working.line_a_min == 0 and working.continuum_a_min == 0:
        ones = np.ones_like(keep)
        return AugExpectations(_y_plus(y_plus, grid), ydot_plus, ydot_c, ydot_l,
                               ydot_c + lam_c * lost, ydot_l + lam_l * lost, ones, ones)
    a_c, a_l = working.rates(params, grid)
    return AugExpectations(_y_plus(y_plus, grid), ydot_plus, ydot_c, ydot_l,
                           ydot_c + lam_c * np.maximum(lost - a_c, 0.0),
                           ydot_l + lam_l * np.maximum(lost - a_l, 0.0), 1.0 - a_c, 1.0 - a_l)


def _y_plus(y_plus, grid):
    return np.full(grid.detector_bins, np.nan) if y_plus is None else y_plus


def e_step_full(params: SpectralParams, grid: EnergyGrid, rsp: ResponseMatrix,
                data: ObservedSpectrum,
                working: WorkingAugmentation = FULL_AUGMENTATION) -> AugExpectations:
    """Conditional expectations of every latent level given the data."""
    y_plus, ydot_plus = outer_expectation(params, grid, rsp, data)
    return inner_expectations(params, grid, ydot_plus, working, y_plus)


def impute_full(params: SpectralParams, grid: EnergyGrid, rsp: ResponseMatrix,
                data: ObservedSpectrum, working: WorkingAugmentation = FULL_AUGMENTATION,
                seed=None) -> AugmentedCounts:
    """One joint draw of every latent level given the data."""
    rngs = level_rngs(seed)
    y_plus = strip_background(params, grid, rsp, data, "draw", rngs["background"])
    ydot_plus = deblur(params, grid, rsp, y_plus, "draw", rngs["deblur"])
    ydot_c, ydot_l = split_sources(params, grid, ydot_plus, "draw", rngs["split"])
    yddot_c, yddot_l, s_c, s_l = restore_absorbed(params, grid, ydot_c, ydot_l, working,
                                                  "draw", rngs["restore"])
    return AugmentedCounts(y_plus, ydot_plus, ydot_c, ydot_l, yddot_c, yddot_l, s_c, s_l)
