import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from emda.em import (ALGORITHMS, AugLevel, CmStep, EmOptions, NonMonotoneError, OrderingError,
                     Trace, aecm_cycle, estimate_rate, run_aecm, run_cda_em, run_ecm, run_ecme,
                     run_em, run_mcem, run_nested_em, run_pxem, validate_ordering)
from emda.instances import heavy_instance, random_instance, two_mode_instance
from emda.spectral import (EnergyGrid, FreeContinuum, GaussianLine, ObservedSpectrum, PowerLaw,
                           ResponseMatrix, SpectralParams, observed_loglik, simulate_spectrum)
from emda.fitting import SpectralProblem
from emda.toy import GaussianToy, q_value

FULL, REDUCED, OBS = AugLevel.FULL, AugLevel.REDUCED, AugLevel.OBSERVED


class CoupledGaussian:
    """Two-parameter problem with a crafted augmentation.

    Latent ``z1 ~ N(t1 + t2, s1)`` and ``z2 ~ N(t2, s2)`` are observed only
    through ``y = z1 + z2``; independent normal priors with precisions
    ``p1, p2`` keep the posterior proper.
    """

    labels = ("t1", "t2")

    def __init__(self, y=3.0, s=(0.1, 1.5), p=(0.02, 0.3)):
        self.y, self.s, self.p = y, np.array(s), np.array(p)

    def loglik(self, t):
        S = self.s.sum()
        return float(-(self.y - t[0] - 2 * t[1]) ** 2 / (2 * S) - 0.5 * np.dot(self.p, t * t))

    def vector(self, t):
        return np.asarray(t, dtype=float)

    def e_step(self, t, aug=FULL):
        mean = np.array([t[0] + t[1], t[1]])
        return mean + self.s / self.s.sum() * (self.y - mean.sum())

    def project(self, t, block, stats):
        t = np.array(t, dtype=float)
        s1, s2 = self.s
        if stats is None:
            S = self.s.sum()
            if block == "t1":
                t[0] = ((self.y - 2 * t[1]) / S) / (1 / S + self.p[0])
            else:
                t[1] = (2 * (self.y - t[0]) / S) / (4 / S + self.p[1])
        elif block == "t1":
            t[0] = ((stats[0] - t[1]) / s1) / (1 / s1 + self.p[0])
        else:
            t[1] = ((stats[0] - t[0]) / s1 + stats[1] / s2) / (1 / s1 + 1 / s2 + self.p[1])
        return t

    def plan(self, name):
        return [CmStep("t1"), CmStep("t2")]


def eight_bin_powerlaw():
    grid = EnergyGrid(np.linspace(1.0, 5.0, 9), 8)
    rsp = ResponseMatrix.gaussian_blur(grid, 0.6)
    truth = SpectralParams(PowerLaw(200.0, 1.2), GaussianLine(120.0, 3.1, 0.09))
    data, _ = simulate_spectrum(truth, grid, rsp, 11)
    start = SpectralParams(PowerLaw(150.0, 1.0), GaussianLine(60.0, 2.9, 0.2))
    return grid, rsp, data, truth, start


@pytest.fixture(scope="module")
def heavy_runs():
    inst = heavy_instance()
    pb = inst.problem()
    o = EmOptions(tol=1e-10, max_iter=20000)
    return inst, {
        "em": run_em(pb, inst.start, o),
        "ecm": run_ecm(pb, inst.start, o),
        "aecm": run_aecm(pb, inst.start, o),
        "nested_em": run_nested_em(pb, inst.start, o),
        "cda_em": run_cda_em(pb, "auto", inst.start, o),
        "cda_em+nested": run_nested_em(pb.with_working("auto"), inst.start, o),
    }


class TestToyEm:
    def test_first_iterate(self):
        toy = GaussianToy(1, 5, 0.0)
        t = run_em(toy, 5.0, EmOptions(max_iter=1))
        oracle = oracles.argmax_1d(lambda th: q_value(toy, th, 5.0), -50, 50)
        assert t.params[1][0] == pytest.approx(25 / 6, abs=1e-12)
        assert oracle == pytest.approx(25 / 6, abs=1e-7)

    @given(st.integers(1, 20), st.integers(0, 20), st.floats(-10, 10), st.floats(-10, 10))
    def test_iterates_follow_closed_form(self, n, m, xb, th0):
        toy = GaussianToy(n, m, xb)
        t = run_em(toy, th0, EmOptions(max_iter=30))
        th = th0
        for row in t.params[1:]:
            th = (n * xb + m * th) / (n + m)
            assert row[0] == pytest.approx(th, rel=1e-12, abs=1e-12)

    def test_fixed_point_is_observed_mean(self):
        t = run_em(GaussianToy(3, 4, 1.7), -8.0, EmOptions(tol=1e-12, max_iter=5000))
        assert t.converged and t.theta == pytest.approx(1.7, abs=1e-9)
        assert t.is_monotone()

    def test_single_block_ecm_equals_em(self):
        toy = GaussianToy(1, 5, 0.3)
        a = run_em(toy, 5.0, EmOptions(max_iter=40))
        b = run_ecm(toy, 5.0, EmOptions(max_iter=40))
        assert np.array_equal(a.param_matrix(), b.param_matrix())

    def test_rate_is_fraction_of_missing_information(self):
        toy = GaussianToy(1, 5, 0.0)
        t = run_em(toy, 5.0, EmOptions(max_iter=20, tol=1e-300))
        ratios = [t.params[k + 1][0] / t.params[k][0] for k in range(5, 20)]
        assert np.allclose(ratios, 5 / 6, atol=1e-6)
        r = estimate_rate(t, [0.0])
        assert r.rho_hat == pytest.approx(5 / 6, abs=1e-6) and r.reliable

    def test_cda_one_step(self):
        toy = GaussianToy(1, 5, 0.0)
        t = run_cda_em(toy, 1.0, 5.0)
        assert abs(t.params[1][0]) < 1e-12
        assert estimate_rate(t, [0.0]).rho_hat == 0.0

    def test_augmented_information(self):
        toy = GaussianToy(1, 5, 0.0)
        assert toy.i_aug(0.0) == 12.0 and toy.i_aug(1.0) == 2.0

    def test_pxem_boundary(self):
        toy = GaussianToy(1, 5, 0.0)
        t = run_pxem(toy, 5.0)
        assert abs(t.params[1][0]) < 1e-12 and t.boundary[1]
        assert t.is_monotone()

    def test_pxem_interior(self):
        toy = GaussianToy(2, 3, 1.5)
        t = run_pxem(toy, -4.0)
        assert t.params[1][0] == pytest.approx(1.5, abs=1e-12) and not t.boundary[1]


class TestMcem:
    def test_tracks_exact_em_within_three_se(self):
        toy = GaussianToy(1, 5, 0.0)
        mc = 10_000
        t = run_mcem(toy, 5.0, EmOptions(max_iter=8, mc_size=mc, seed=3, tol=1e-300))
        se = math.sqrt(toy.m * 0.5 / mc) / (toy.n + toy.m)
        for prev, nxt in zip(t.params[:-1], t.params[1:]):
            exact = toy.project(prev[0], "theta", toy.e_step(prev[0]))
            assert abs(nxt[0] - exact) < 3 * se

    def test_small_sample_reaches_neighbourhood(self):
        t = run_mcem(GaussianToy(1, 5, 0.0), 5.0, EmOptions(max_iter=200, mc_size=2, seed=1))
        assert abs(np.mean([p[0] for p in t.params[-20:]])) < 1.0

    def test_seeded_reproducibility(self):
        toy = GaussianToy(2, 3, 1.0)
        a = run_mcem(toy, 4.0, EmOptions(max_iter=15, mc_size=5, seed=7))
        b = run_mcem(toy, 4.0, EmOptions(max_iter=15, mc_size=5, seed=7))
        c = run_mcem(toy, 4.0, EmOptions(max_iter=15, mc_size=5, seed=8))
        assert np.array_equal(a.param_matrix(), b.param_matrix())
        assert not np.array_equal(a.param_matrix(), c.param_matrix())

    def test_mc_size_validated(self):
        with pytest.raises(ValueError):
            run_mcem(GaussianToy(1, 5, 0.0), 5.0, EmOptions(mc_size=1))

    def test_spectral_mcem_runs(self):
        inst = random_instance(7)
        t = run_mcem(inst.problem(), inst.start, EmOptions(max_iter=5, mc_size=4, seed=1))
        assert np.all(np.isfinite(t.loglik))


class TestOptions:
    @pytest.mark.parametrize("kw", [dict(tol=0.0), dict(inner_iters=0), dict(max_iter=0)])
    def test_rejected(self, kw):
        with pytest.raises(ValueError):
            EmOptions(**kw)

    def test_algorithm_names(self):
        assert set(ALGORITHMS) >= {"em", "ecm", "ecme", "aecm", "nested_em", "mcem", "cda_em",
                                   "pxem"}


class TestValidateOrdering:
    def test_full_then_observed_ok(self):
        assert validate_ordering([CmStep("a", FULL), CmStep("b", OBS)]).ok

    def test_observed_then_full_rejected(self):
        rep = validate_ordering([CmStep("a", OBS), CmStep("b", FULL)])
        assert not rep.ok and rep.offending == (0, 1)
        assert "step 2" in rep.message and "step 1" in rep.message

    def test_single_step_ok(self):
        assert validate_ordering([CmStep("a", FULL)]).ok

    def test_refresh_opens_a_new_segment(self):
        assert validate_ordering([CmStep("a", REDUCED), CmStep("b", FULL, refresh=True)]).ok
        assert not validate_ordering([CmStep("a", REDUCED), CmStep("b", FULL)]).ok

    @given(st.lists(st.tuples(st.sampled_from(list(AugLevel)), st.booleans()), min_size=1,
                    max_size=8))
    def test_matches_segment_definition(self, spec):
        steps = [CmStep(f"b{k}", a, r) for k, (a, r) in enumerate(spec)]
        ok = True
        for k in range(1, len(steps)):
            if not steps[k].refresh and steps[k].aug > steps[k - 1].aug:
                ok = False
        assert validate_ordering(steps).ok == ok

    def test_drivers_reject_misordered_plans(self):
        inst = heavy_instance()
        bad = [CmStep("line", REDUCED), CmStep("continuum", FULL)]
        with pytest.raises(OrderingError) as exc:
            run_aecm(inst.problem(), inst.start, steps=bad)
        assert "line" in str(exc.value) and "continuum" in str(exc.value)
        with pytest.raises(OrderingError):
            run_ecme(CoupledGaussian(), np.zeros(2), steps=[CmStep("t1", OBS), CmStep("t2")])


class TestOrderingNecessity:
    def test_misordered_cycle_decreases_loglik(self):
        pb = CoupledGaussian()
        start = np.array([-5.0, -5.0])
        bad = [CmStep("t1", OBS), CmStep("t2", FULL)]
        after = aecm_cycle(pb, start, bad)
        assert pb.loglik(after) < pb.loglik(start) - 1.0
        with pytest.raises(NonMonotoneError):
            from emda.em import _drive
            _drive(pb, start, EmOptions(), "bypassed",
                   lambda th, k: (aecm_cycle(pb, th, bad), False))

    def test_valid_order_is_monotone(self):
        pb = CoupledGaussian()
        t = run_ecme(pb, np.array([-5.0, -5.0]), EmOptions(tol=1e-12, max_iter=5000),
                     steps=[CmStep("t2", FULL), CmStep("t1", OBS)])
        assert t.is_monotone() and t.converged
        oracle = oracles.argmax_nd(pb.loglik, [0.0, 0.0])
        assert np.allclose(t.theta, oracle, atol=1e-5)

    def test_all_observed_is_gauss_seidel(self):
        pb = CoupledGaussian()
        t = run_ecme(pb, np.array([1.0, 1.0]), EmOptions(max_iter=10),
                     steps=[CmStep("t1", OBS), CmStep("t2", OBS)])
        x = np.array([1.0, 1.0])
        S = pb.s.sum()
        for row in t.params[1:]:
            x[0] = ((pb.y - 2 * x[1]) / S) / (1 / S + pb.p[0])
            x[1] = (2 * (pb.y - x[0]) / S) / (4 / S + pb.p[1])
            assert np.allclose(row, x, rtol=1e-12)
        assert t.is_monotone()


class TestSpectralDrivers:
    def test_all_monotone_and_converged(self, heavy_runs):
        for name, t in heavy_runs[1].items():
            assert t.converged and t.is_monotone(), name

    def test_fixed_points_agree(self, heavy_runs):
        ref = heavy_runs[1]["em"].params[-1]
        for name, t in heavy_runs[1].items():
            assert np.all(np.abs(t.params[-1] - ref) / (1 + np.abs(ref)) < 1e-5), name

    def test_fixed_points_agree_on_a_random_instance(self):
        inst = random_instance(3)
        pb = inst.problem()
        o = EmOptions(tol=1e-10, max_iter=20000)
        ref = run_em(pb, inst.start, o).params[-1]
        for t in (run_aecm(pb, inst.start, o), run_nested_em(pb, inst.start, o),
                  run_cda_em(pb, "auto", inst.start, o)):
            assert np.all(np.abs(t.params[-1] - ref) / (1 + np.abs(ref)) < 1e-5), t.algorithm

    def test_nested_and_cda_take_fewer_iterations(self, heavy_runs):
        it = {k: t.iterations for k, t in heavy_runs[1].items()}
        assert it["nested_em"] < it["em"] and it["cda_em"] < it["em"]
        assert it["cda_em+nested"] < min(it["nested_em"], it["cda_em"])

    def test_cda_rate_not_worse(self, heavy_runs):
        inst, runs = heavy_runs
        star = run_em(inst.problem(), runs["em"].theta, EmOptions(tol=1e-14, max_iter=5000,
                                                                   min_iter=50)).params[-1]
        r_em = estimate_rate(runs["em"], star, floor=1e-9)
        r_cda = estimate_rate(runs["cda_em"], star, floor=1e-9)
        assert 0 < r_em.rho_hat < 1
        assert r_cda.rho_hat <= r_em.rho_hat

    def test_nested_with_one_inner_cycle_is_monotone(self):
        inst = heavy_instance()
        t = run_nested_em(inst.problem(), inst.start, EmOptions(inner_iters=1, max_iter=50))
        assert t.is_monotone()

    def test_em_matches_numeric_maximiser(self):
        grid, rsp, data, truth, start = eight_bin_powerlaw()
        t = run_em(SpectralProblem(grid, rsp, data, start), start,
                   EmOptions(tol=1e-12, max_iter=50000))

        def f(x):
            if not (grid.edges[0] < x[3] < grid.edges[-1]):
                return -np.inf
            p = SpectralParams(PowerLaw(math.exp(x[0]), x[1]),
                               GaussianLine(math.exp(x[2]), x[3], math.exp(x[4])))
            return observed_loglik(p, grid, rsp, data)

        x0 = [math.log(truth.continuum.gamma), truth.continuum.beta, math.log(truth.line.nu),
              truth.line.mu, math.log(truth.line.sigma2)]
        best = f(oracles.argmax_nd(f, x0))
        assert t.final_loglik == pytest.approx(best, abs=1e-4)
        assert t.final_loglik >= best - 1e-4

    def test_ecm_smoothing_fixed_point_matches_numeric_maximiser(self):
        grid = EnergyGrid(np.linspace(1.0, 5.0, 9), 8)
        rsp = ResponseMatrix.gaussian_blur(grid, 0.8)
        truth = SpectralParams(FreeContinuum(np.linspace(40, 10, 8), 0.05))
        data, _ = simulate_spectrum(truth, grid, rsp, 5)
        start = SpectralParams(FreeContinuum(np.full(8, 20.0), 0.05))
        pb = SpectralProblem(grid, rsp, data, start)
        t = run_ecm(pb, start, EmOptions(tol=1e-12, max_iter=50000))
        assert t.is_monotone()

        def f(x):
            return pb.loglik(SpectralParams(FreeContinuum(np.exp(x), 0.05)))

        x = oracles.argmax_nd(f, np.log(truth.continuum.theta))
        assert t.final_loglik == pytest.approx(f(x), abs=1e-4)
        assert np.allclose(t.params[-1], np.exp(x), atol=1e-2 * (1 + np.exp(x).max()))

    def test_ecme_escapes_minor_mode(self):
        inst = two_mode_instance()
        pb = inst.problem()
        o = EmOptions(tol=1e-10, max_iter=20000)
        em = run_em(pb, inst.start, o)
        ecme = run_ecme(pb, inst.start, o)
        assert ecme.is_monotone()
        assert abs(em.theta.line.mu - 2.75) < 0.25
        # oracle: the mu-profile of the log posterior on a fine grid
        mus = np.linspace(1.0, 7.0, 6001)
        prof = [pb.loglik(ecme.theta.replace(line=GaussianLine(ecme.theta.line.nu, m,
                                                                 ecme.theta.line.sigma2)))
                for m in mus]
        assert abs(ecme.theta.line.mu - mus[int(np.argmax(prof))]) < 2e-3
        assert ecme.final_loglik > em.final_loglik + 10


class TestTrace:
    def test_csv_columns(self):
        toy = GaussianToy(1, 5, 0.0)
        t = run_em(toy, 5.0, EmOptions(max_iter=3))
        text = t.to_csv(with_seconds=False)
        lines = text.strip().split("\n")
        assert lines[0] == "iter,seconds,loglik,theta"
        assert lines[1] == "0,0.0,-25.0,5.0" and len(lines) == 5

    def test_rate_needs_a_trace(self):
        t = Trace("em", ["x"])
        t.record(0, 0.0, 0.0, [1.0])
        with pytest.raises(ValueError):
            estimate_rate(t, [0.0])
