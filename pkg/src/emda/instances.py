"""Reproducible spectral test instances."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fitting import SpectralProblem
from .spectral import (Absorption, DeltaLine, EnergyGrid, FreeContinuum, GaussianLine,
                       ObservedSpectrum, PowerLaw, ResponseMatrix, SpectralParams,
                       simulate_spectrum)


@dataclass(eq=False)
class SpectralInstance:
    grid: EnergyGrid
    rsp: ResponseMatrix
    data: ObservedSpectrum
    truth: SpectralParams
    start: SpectralParams
    name: str = ""

    def problem(self, **kwargs) -> SpectralProblem:
        return SpectralProblem(self.grid, self.rsp, self.data, self.start, **kwargs)


def random_instance(seed: int, max_bins: int = 32) -> SpectralInstance:
    """Small random instance with every model component switched on at random."""
    rng = np.random.default_rng(seed)
    J = int(rng.integers(4, max_bins + 1))
    I = int(rng.integers(max(2, J // 2), max_bins + 1))
    lo = float(rng.uniform(0.3, 1.0))
    hi = lo + float(rng.uniform(3.0, 8.0))
    grid = EnergyGrid(np.linspace(lo, hi, J + 1), I)
    det_edges = np.linspace(lo, hi, I + 1)
    eff = rng.uniform(0.8, 1.0, J) if rng.random() < 0.5 else 1.0
    rsp = ResponseMatrix.gaussian_blur(grid, float(rng.uniform(0.05, 0.6) * (hi - lo) / 4),
                                       eff, det_edges)
    if rng.random() < 0.7:
        cont = PowerLaw(float(rng.uniform(20, 200)), float(rng.uniform(0.5, 2.5)))
        start_cont = PowerLaw(cont.gamma * float(rng.uniform(0.5, 1.5)),
                              cont.beta + float(rng.uniform(-0.5, 0.5)))
    else:
        theta = rng.uniform(10, 60, J)
        omega = rng.uniform(0, 0.05, J - 1) if rng.random() < 0.5 else np.zeros(J - 1)
        cont = FreeContinuum(theta, omega)
        start_cont = FreeContinuum(np.full(J, float(theta.mean())), omega)
    u = rng.random()
    if u < 0.6:
        mu = float(rng.uniform(lo + 0.2 * (hi - lo), hi - 0.2 * (hi - lo)))
        line = GaussianLine(float(rng.uniform(30, 300)), mu, float(rng.uniform(0.02, 0.3)) ** 2)
        start_line = GaussianLine(line.nu * 0.5 + 10, mu + float(rng.normal(0, 0.1)),
                                  line.sigma2 * 2.0)
    elif u < 0.8:
        j0 = int(rng.integers(J))
        line = DeltaLine(float(rng.uniform(20, 200)), j0)
        start_line = DeltaLine(line.nu * 0.5 + 5, j0)
    else:
        line = start_line = None
    d = rng.uniform(0.3, 1.0, J) if rng.random() < 0.5 else None
    if rng.random() < 0.6:
        absorption = Absorption(d, float(rng.uniform(0.0, 1.5)))
        start_abs = Absorption(d, float(rng.uniform(0.2, 1.0)))
    else:
        absorption = start_abs = Absorption(d, None)
    bkg = rng.uniform(0, 2, I) if rng.random() < 0.5 else None
    truth = SpectralParams(cont, line, absorption, bkg)
    start = SpectralParams(start_cont, start_line, start_abs, bkg)
    data, _ = simulate_spectrum(truth, grid, rsp, seed)
    return SpectralInstance(grid, rsp, data, truth, start, f"random-{seed}")


def heavy_instance() -> SpectralInstance:
    """64-bin instance with a blurring response and deep absorption under the line.

    The known effective area drops from 0.9 to 0.02 around the 4 keV line, so
    nearly all line photons are absorbed and the standard augmentation
    carries a large fraction of missing information for the line.  The
    response blurs with a 0.3 keV FWHM (about 2.6 bins).  Bundled copies of
    these files live in ``emda/data/heavy``.
    """
    J = 64
    grid = EnergyGrid(np.linspace(0.5, 8.0, J + 1), J)
    E = grid.mean_energies
    d = 0.9 - 0.88 * np.exp(-0.5 * ((E - 4.0) / 0.8) ** 2)
    rsp = ResponseMatrix.gaussian_blur(grid, fwhm=0.3)
    bkg = np.full(J, 0.2)
    truth = SpectralParams(PowerLaw(400.0, 1.5), GaussianLine(600.0, 4.0, 0.3 ** 2),
                           Absorption(d, None), bkg)
    data, _ = simulate_spectrum(truth, grid, rsp, 1)
    start = SpectralParams(PowerLaw(280.0, 1.2), GaussianLine(180.0, 3.8, 0.6 ** 2),
                           Absorption(d, None), bkg)
    return SpectralInstance(grid, rsp, data, truth, start, "heavy")


def two_mode_instance() -> SpectralInstance:
    """12-bin spectrum with two line-like bumps; EM started near the smaller
    bump stays there while the observed-data line-centre search finds the
    larger one."""
    J = 12
    grid = EnergyGrid(np.linspace(1.0, 7.0, J + 1), J)
    rsp = ResponseMatrix.identity(J)
    counts = np.array([20, 20, 20, 45, 20, 20, 20, 20, 110, 20, 20, 20])
    start = SpectralParams(PowerLaw(20.0 / 0.5, 0.0), GaussianLine(20.0, 2.75, 0.05))
    truth = SpectralParams(PowerLaw(40.0, 0.0), GaussianLine(90.0, 5.25, 0.05))
    return SpectralInstance(grid, rsp, ObservedSpectrum(counts), truth, start, "two-mode")


def docs_instance() -> SpectralInstance:
    """The 4-bin worked example of the README."""
    grid = EnergyGrid(np.array([1.0, 2.0, 3.0, 4.0, 5.0]), 4)
    rsp = ResponseMatrix(np.array([[0.8, 0.1, 0.0, 0.0],
                                   [0.2, 0.8, 0.1, 0.0],
                                   [0.0, 0.1, 0.8, 0.2],
                                   [0.0, 0.0, 0.1, 0.8]]))
    truth = SpectralParams(PowerLaw(100.0, 1.0), GaussianLine(40.0, 3.5, 0.09),
                           Absorption(None, None), np.array([1.0, 1.0, 1.0, 1.0]))
    data, _ = simulate_spectrum(truth, grid, rsp, 42)
    return SpectralInstance(grid, rsp, data, truth, truth, "docs")
