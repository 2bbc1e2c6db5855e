import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from emda.augmentation import (FULL_AUGMENTATION, PreconditionError, WorkingAugmentation,
                               deblur, e_step_full, impute_full, inner_expectations,
                               restore_absorbed, split_sources, strip_background)
from emda.fitting import SpectralProblem
from emda.spectral import (Absorption, DeltaLine, DomainError, EnergyGrid, GaussianLine,
                           ObservedSpectrum, PowerLaw, ResponseMatrix, SpectralError,
                           SpectralParams, continuum_intensity, line_intensity, transmission)


def small_case(seed=0, bkg=True, absorb=True, lost=True):
    rng = np.random.default_rng(seed)
    grid = EnergyGrid(np.array([1.0, 2.0, 3.0, 4.0, 5.0]), 4)
    M = rng.uniform(0.05, 1.0, (4, 4))
    M = M / M.sum(axis=0) * (rng.uniform(0.7, 1.0, 4) if lost else 1.0)
    params = SpectralParams(PowerLaw(float(rng.uniform(1, 4)), float(rng.uniform(0, 1.5))),
                            GaussianLine(float(rng.uniform(1, 4)), float(rng.uniform(2, 4)),
                                         float(rng.uniform(0.1, 0.6))),
                            Absorption(rng.uniform(0.4, 1.0, 4), float(rng.uniform(0.1, 1)))
                            if absorb else Absorption(),
                            rng.uniform(0.1, 1.0, 4) if bkg else None)
    return grid, ResponseMatrix(M), params


class TestStripBackground:
    def test_no_background_is_identity(self):
        grid, rsp, p = small_case(bkg=False)
        y = ObservedSpectrum(np.array([3, 0, 5, 1]))
        assert np.array_equal(strip_background(p, grid, rsp, y), y.counts)
        assert np.array_equal(strip_background(p, grid, rsp, y, "draw", 1), y.counts)

    def test_binomial_mean_example(self):
        grid = EnergyGrid(np.array([1.0, 2.0]), 1)
        p = SpectralParams(PowerLaw(8.0, 0.0), None, Absorption(), np.array([2.0]))
        y = ObservedSpectrum(np.array([6]))
        rsp = ResponseMatrix.identity(1)
        assert strip_background(p, grid, rsp, y)[0] == pytest.approx(4.8, rel=1e-14)
        draws = strip_background(p, grid, rsp, ObservedSpectrum(np.array([6] * 1)), "draw",
                                 np.random.default_rng(3))
        assert 0 <= draws[0] <= 6
        rng = np.random.default_rng(4)
        mc = np.mean([strip_background(p, grid, rsp, y, "draw", rng)[0] for _ in range(20000)])
        assert abs(mc - 4.8) < 4 * np.sqrt(6 * 0.8 * 0.2 / 20000)

    def test_zero_counts_stay_zero(self):
        grid, rsp, p = small_case()
        y = ObservedSpectrum(np.zeros(4, dtype=int))
        assert not strip_background(p, grid, rsp, y).any()

    def test_background_above_mean_rejected(self):
        grid, rsp, p = small_case()
        with pytest.raises(SpectralError):
            strip_background(p, grid, rsp, ObservedSpectrum(np.ones(4, dtype=int)),
                             xi=np.full(4, 0.01))


class TestDeblur:
    def test_identity_response(self):
        grid, _, p = small_case()
        y = np.array([3.0, 0.0, 2.0, 7.0])
        assert np.allclose(deblur(p, grid, ResponseMatrix.identity(4), y), y)
        assert np.array_equal(deblur(p, grid, ResponseMatrix.identity(4), y.astype(int),
                                     "draw", 5), y)

    def test_bayes_weights_example(self):
        grid = EnergyGrid(np.array([1.0, 2.0, 3.0]), 1)
        from emda.spectral import FreeContinuum
        p = SpectralParams(FreeContinuum(np.array([1.0, 3.0])))
        rsp = ResponseMatrix(np.array([[0.5, 0.5]]))
        out = deblur(p, grid, rsp, np.array([8.0]))
        # plus the photons blurred off the detector: lambda' * 0.5
        assert np.allclose(out - np.array([0.5, 1.5]), [2.0, 6.0], rtol=1e-14)
        # enumeration of the binomial posterior of the split of 8 photons
        from scipy.stats import binom
        k = np.arange(9)
        assert np.dot(k, binom.pmf(k, 8, 0.25)) == pytest.approx(2.0, rel=1e-12)

    @given(st.integers(0, 10_000))
    def test_conservation_with_unit_columns(self, seed):
        grid, rsp, p = small_case(seed, lost=False)
        y = np.random.default_rng(seed).integers(0, 20, 4)
        assert deblur(p, grid, rsp, y).sum() == pytest.approx(y.sum(), rel=1e-12)
        assert deblur(p, grid, rsp, y, "draw", seed).sum() == y.sum()

    def test_zero_denominator_rejected(self):
        grid = EnergyGrid(np.array([1.0, 2.0, 3.0]), 2)
        p = SpectralParams(PowerLaw(1.0, 0.0), None, Absorption(np.array([0.0, 1.0])))
        with pytest.raises(DomainError):
            deblur(p, grid, ResponseMatrix.identity(2), np.array([1.0, 0.0]))


class TestSplitSources:
    def test_line_off(self):
        grid, _, p = small_case()
        p = p.replace(line=None)
        c, l = split_sources(p, grid, np.array([1.0, 2.0, 3.0, 4.0]))
        assert not l.any() and np.allclose(c, [1, 2, 3, 4])

    def test_binomial_mean_example(self):
        from emda.spectral import FreeContinuum
        grid = EnergyGrid(np.array([1.0, 2.0]), 1)
        p = SpectralParams(FreeContinuum(np.array([1.0])), DeltaLine(3.0, 0))
        c, l = split_sources(p, grid, np.array([8.0]))
        assert l[0] == pytest.approx(6.0) and c[0] == pytest.approx(2.0)
        rng = np.random.default_rng(0)
        mc = np.mean([split_sources(p, grid, np.array([8]), "draw", rng)[1][0]
                      for _ in range(20000)])
        assert abs(mc - 6.0) < 4 * np.sqrt(8 * 0.75 * 0.25 / 20000)

    @given(st.integers(0, 10_000))
    def test_sum_preserved(self, seed):
        grid, _, p = small_case(seed)
        y = np.random.default_rng(seed).integers(0, 30, 4)
        for mode in ("expect", "draw"):
            c, l = split_sources(p, grid, y, mode, seed)
            assert np.allclose(c + l, y) and np.all(c >= 0) and np.all(l >= 0)


class TestRestoreAbsorbed:
    def test_no_absorption(self):
        grid, _, p = small_case(absorb=False)
        c, l, _, _ = restore_absorbed(p, grid, np.ones(4), np.full(4, 2.0))
        assert np.allclose(c, 1.0) and np.allclose(l, 2.0)

    def test_eta_example(self):
        from emda.spectral import FreeContinuum
        grid = EnergyGrid(np.array([1.0, 2.0]), 1)
        p = SpectralParams(FreeContinuum(np.array([1.0])), DeltaLine(10.0, 0),
                           Absorption(np.array([0.6])))
        _, l, _, _ = restore_absorbed(p, grid, np.zeros(1), np.array([3.0]))
        assert l[0] == pytest.approx(7.0)
        rng = np.random.default_rng(1)
        mc = np.mean([restore_absorbed(p, grid, np.zeros(1), np.array([3]), mode="draw",
                                       seed=rng)[1][0] for _ in range(20000)])
        assert abs(mc - 7.0) < 4 * np.sqrt(4.0 / 20000)

    def test_delta_line_at_maximum_needs_no_imputation(self):
        from emda.spectral import FreeContinuum
        grid = EnergyGrid(np.array([1.0, 2.0, 3.0]), 2)
        p = SpectralParams(FreeContinuum(np.array([1.0, 1.0])), DeltaLine(10.0, 1),
                           Absorption(np.array([0.9, 0.3])))
        w = WorkingAugmentation.auto(p, grid)
        assert w.line_a_min == pytest.approx(0.7)
        _, l, _, scale_l = restore_absorbed(p, grid, np.zeros(2), np.array([0.0, 3.0]), w)
        assert l[1] == pytest.approx(3.0, abs=1e-12)
        _, ld, _, _ = restore_absorbed(p, grid, np.zeros(2), np.array([0, 3]), w, "draw", 2)
        assert ld[1] == 3
        assert scale_l[1] == pytest.approx(0.3)

    def test_illegal_working_value_rejected(self):
        from emda.spectral import FreeContinuum
        grid = EnergyGrid(np.array([1.0, 2.0, 3.0]), 2)
        p = SpectralParams(FreeContinuum(np.array([1.0, 1.0])), DeltaLine(10.0, 1),
                           Absorption(np.array([0.9, 0.3])))
        with pytest.raises(PreconditionError):
            restore_absorbed(p, grid, np.zeros(2), np.ones(2), WorkingAugmentation(0.8))
        with pytest.raises(PreconditionError):
            WorkingAugmentation(1.0)


class TestEStep:
    def test_fully_observed(self):
        grid = EnergyGrid(np.array([1.0, 2.0, 3.0, 4.0, 5.0]), 4)
        p = SpectralParams(PowerLaw(3.0, 1.0), GaussianLine(0.0, 3.0, 0.2))
        y = ObservedSpectrum(np.array([2, 0, 5, 1]))
        e = e_step_full(p, grid, ResponseMatrix.identity(4), y)
        assert np.allclose(e.yddot_c, y.counts) and not e.yddot_l.any()

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_enumeration(self, seed):
        grid, rsp, p = small_case(seed)
        rng = np.random.default_rng(100 + seed)
        y = rng.multinomial(int(rng.integers(4, 9)), np.full(4, 0.25))
        e = e_step_full(p, grid, rsp, ObservedSpectrum(y))
        lam_c = continuum_intensity(p.continuum, grid)
        lam_l = line_intensity(p.line, grid)
        oracle = oracles.enumerate_expectations(lam_c, lam_l, transmission(p.absorption, grid),
                                                rsp.dense, p.background, y)
        for level, val in oracle.items():
            assert np.allclose(getattr(e, level), val, atol=1e-9, rtol=0), level

    @given(st.integers(0, 10_000))
    def test_invariants(self, seed):
        grid, rsp, p = small_case(seed)
        y = np.random.default_rng(seed).integers(0, 50, 4)
        e_step_full(p, grid, rsp, ObservedSpectrum(y)).check()
        e_step_full(p, grid, rsp, ObservedSpectrum(y), WorkingAugmentation.auto(p, grid)).check()

    def test_draws_average_to_expectation(self):
        grid, rsp, p = small_case(3)
        y = ObservedSpectrum(np.array([7, 3, 9, 4]))
        e = e_step_full(p, grid, rsp, y)
        n = 20000
        draws = [impute_full(p, grid, rsp, y, seed=s) for s in range(n)]
        for level in ("y_plus", "ydot_plus", "ydot_c", "ydot_l", "yddot_c", "yddot_l"):
            x = np.array([getattr(d, level) for d in draws], dtype=float)
            se = x.std(axis=0, ddof=1) / np.sqrt(n) + 1e-12
            assert np.all(np.abs(x.mean(axis=0) - getattr(e, level)) < 4 * se + 1e-9), level

    @given(st.integers(0, 10_000))
    def test_every_draw_satisfies_invariants(self, seed):
        grid, rsp, p = small_case(seed)
        y = np.random.default_rng(seed).integers(0, 30, 4)
        d = impute_full(p, grid, rsp, ObservedSpectrum(y), WorkingAugmentation.auto(p, grid), seed)
        d.check(y)

    def test_draw_is_deterministic_and_exact_when_fully_observed(self):
        grid = EnergyGrid(np.array([1.0, 2.0, 3.0, 4.0, 5.0]), 4)
        p = SpectralParams(PowerLaw(3.0, 1.0), GaussianLine(2.0, 3.0, 0.2))
        y = ObservedSpectrum(np.array([2, 0, 5, 1]))
        a = impute_full(p, grid, ResponseMatrix.identity(4), y, seed=9)
        b = impute_full(p, grid, ResponseMatrix.identity(4), y, seed=9)
        assert np.array_equal(a.y_plus, y.counts) and np.array_equal(a.ydot_plus, y.counts)
        assert np.array_equal(a.ydot_l, b.ydot_l)


class TestReducedAugmentation:
    def _heavy(self):
        grid = EnergyGrid(np.linspace(1.0, 7.0, 13), 12)
        d = 0.9 - 0.8 * np.exp(-0.5 * ((grid.mean_energies - 4.0) / 1.0) ** 2)
        p = SpectralParams(PowerLaw(30.0, 1.0), GaussianLine(50.0, 4.0, 0.1), Absorption(d, 0.2))
        y = ObservedSpectrum(np.random.default_rng(0).poisson(20, 12))
        return grid, ResponseMatrix.gaussian_blur(grid, 0.6), p, y

    def test_observed_loglik_unchanged_by_working_value(self):
        grid, rsp, p, y = self._heavy()
        plain = SpectralProblem(grid, rsp, y, p)
        for w in ("auto", WorkingAugmentation(0.05)):
            assert plain.with_working(w).loglik(p) == plain.loglik(p)

    def test_reduced_model_reproduces_the_detected_rate(self):
        # Restored counts are Poisson(scale * lambda); thinning them with
        # probability keep / scale must give the same detected rate keep * lambda.
        grid, rsp, p, y = self._heavy()
        w = WorkingAugmentation.auto(p, grid)
        a_c, a_l = w.rates(p, grid)
        keep = transmission(p.absorption, grid)
        assert np.all(keep / (1 - a_l) <= 1 + 1e-12)
        lam = line_intensity(p.line, grid)
        assert np.allclose((1 - a_l) * lam * keep / (1 - a_l), keep * lam)

    def test_line_information_decreases(self):
        grid, rsp, p, y = self._heavy()
        full = e_step_full(p, grid, rsp, y)
        red = e_step_full(p, grid, rsp, y, WorkingAugmentation.auto(p, grid))
        # complete-data information for nu is (imputed line total) / nu^2
        assert WorkingAugmentation.auto(p, grid).line_a_min > 0
        assert red.yddot_l.sum() / p.line.nu ** 2 < full.yddot_l.sum() / p.line.nu ** 2

    def test_inner_fast_path_matches_general_path(self):
        grid, rsp, p, y = self._heavy()
        ydot = np.random.default_rng(1).uniform(0, 10, 12)
        a = inner_expectations(p, grid, ydot, FULL_AUGMENTATION)
        c, l = split_sources(p, grid, ydot)
        rc, rl, _, _ = restore_absorbed(p, grid, c, l, FULL_AUGMENTATION)
        assert np.allclose(a.yddot_c, rc, rtol=1e-14) and np.allclose(a.yddot_l, rl, rtol=1e-14)
