"""Spectral fitting and sampling problems for the generic drivers."""
from __future__ import annotations

import math
from dataclasses import replace
from typing import Optional, Union

import numpy as np
from scipy import optimize
from scipy.special import xlogy

from . import augmentation as aug
from .counts import average as average_counts
from .em import AugLevel, CmStep
from .spectral import (Absorption, DeltaLine, DomainError, EnergyGrid, FreeContinuum,
                       GaussianLine, ObservedSpectrum, PowerLaw, ResponseMatrix, SpectralError,
                       SpectralParams, bin_intensity, cm_step_absorption,
                       cm_step_free_continuum, cm_step_powerlaw, continuum_intensity,
                       expected_counts, line_bin_probs, line_intensity, log_prior,
                       maximize_line, poisson_loglik, transmission)

Working = Union[None, str, aug.WorkingAugmentation]


def param_labels(params: SpectralParams) -> list:
    c = params.continuum
    labels = ["gamma", "beta"] if isinstance(c, PowerLaw) else \
        [f"theta_{j + 1}" for j in range(c.theta.size)]
    if isinstance(params.line, GaussianLine):
        labels += ["nu", "mu", "sigma2"]
    elif isinstance(params.line, DeltaLine):
        labels += ["nu"]
    if params.absorption.xi is not None:
        labels += ["xi"]
    return labels


def param_vector(params: SpectralParams) -> np.ndarray:
    c = params.continuum
    parts = [[c.gamma, c.beta]] if isinstance(c, PowerLaw) else [c.theta]
    if isinstance(params.line, GaussianLine):
        parts.append([params.line.nu, params.line.mu, params.line.sigma2])
    elif isinstance(params.line, DeltaLine):
        parts.append([params.line.nu])
    if params.absorption.xi is not None:
        parts.append([params.absorption.xi])
    return np.concatenate([np.asarray(p, dtype=float) for p in parts])


class _SpectralBlocks:
    """CM-steps shared by the observed-data problem and its inner problem."""

    grid: EnergyGrid
    newton_steps: int

    def vector(self, theta: SpectralParams) -> np.ndarray:
        return param_vector(theta)

    def _line(self, theta, stats, fix_mu=False):
        if theta.line is None:
            return theta
        new = maximize_line(stats.yddot_l, self.grid, theta.line, stats.scale_l,
                            fix_mu=fix_mu, max_newton=self.newton_steps)
        return theta.replace(line=new)

    def _continuum(self, theta, stats):
        c = theta.continuum
        if isinstance(c, PowerLaw):
            new = cm_step_powerlaw(stats, self.grid, c, max_newton=self.newton_steps)
        else:
            new = cm_step_free_continuum(stats, self.grid, c)
        return theta.replace(continuum=new)

    def _absorption(self, theta, stats):
        if theta.absorption.xi is None:
            return theta
        new = cm_step_absorption(stats, self.grid, theta.absorption, max_newton=self.newton_steps)
        return theta.replace(absorption=new)

    def project(self, theta: SpectralParams, block: str, stats) -> SpectralParams:
        if stats is None:
            if block != "mu":
                raise ValueError(f"block {block!r} has no observed-data update")
            return self._observed_mu(theta)
        if block == "all":
            return self._absorption(self._continuum(self._line(theta, stats), stats), stats)
        if block == "line":
            return self._line(theta, stats)
        if block == "line_shape":
            return self._line(theta, stats, fix_mu=True)
        if block == "continuum":
            return self._continuum(theta, stats)
        if block == "absorption":
            return self._absorption(theta, stats)
        if block == "continuum+absorption":
            return self._absorption(self._continuum(theta, stats), stats)
        raise ValueError(f"unknown block {block!r}")

    def _observed_mu(self, theta):
        raise ValueError("observed-data steps need the observed-data problem")


class SpectralProblem(_SpectralBlocks):
    """Observed-data fitting problem for the Poisson spectral model.

    ``working`` switches on conditional augmentation for the ``"em"`` plan:
    ``"auto"`` recomputes the working absorption rates at the start of each
    reduced segment, a ``WorkingAugmentation`` fixes them, ``None`` means
    standard EM.  ``reduced`` controls what a ``REDUCED`` step in a user plan
    uses (``"auto"`` by default; ``"off"`` makes it the full augmentation).
    """

    def __init__(self, grid: EnergyGrid, rsp: ResponseMatrix, data: ObservedSpectrum,
                 template: SpectralParams, working: Working = None, reduced: Working = "auto",
                 continuum_amin: bool = False, newton_steps: int = 1):
        if rsp.shape != (grid.detector_bins, grid.ideal_bins):
            raise SpectralError("response does not match grid")
        if data.counts.shape != (grid.detector_bins,):
            raise SpectralError("spectrum length does not match detector bins")
        self.grid, self.rsp, self.data = grid, rsp, data
        self.template = template
        self.labels = param_labels(template)
        self.working = working
        self.reduced = working if working is not None else reduced
        self.continuum_amin = continuum_amin
        self.newton_steps = newton_steps
        self._fwd = (None, None)
        self._outer = (None, None)

    # bookkeeping ---------------------------------------------------------
    def with_working(self, working: Working = "auto") -> "SpectralProblem":
        return SpectralProblem(self.grid, self.rsp, self.data, self.template, working,
                               self.reduced if working is None else working,
                               self.continuum_amin, self.newton_steps)

    def _expected(self, theta):
        if self._fwd[0] is not theta:
            self._fwd = (theta, expected_counts(theta, self.grid, self.rsp))
        return self._fwd[1]

    def resolve_working(self, theta, level: AugLevel) -> aug.WorkingAugmentation:
        if level != AugLevel.REDUCED:
            return aug.FULL_AUGMENTATION
        w = self.reduced
        if w is None or w == "off":
            return aug.FULL_AUGMENTATION
        if isinstance(w, aug.WorkingAugmentation):
            return w
        if w == "auto":
            return aug.WorkingAugmentation.auto(theta, self.grid, self.continuum_amin)
        raise ValueError(f"unknown working augmentation {w!r}")

    # contract -------------------------------------------------------------
    def loglik(self, theta: SpectralParams) -> float:
        return poisson_loglik(self.data.counts, self._expected(theta)) + log_prior(theta)

    def plan(self, name: str) -> list:
        has_line = self.template.line is not None
        has_abs = self.template.absorption.xi is not None
        if name == "em":
            if self.working is None or not has_line:
                return [CmStep("all", AugLevel.FULL)]
            return [CmStep("line", AugLevel.REDUCED),
                    CmStep("continuum+absorption", AugLevel.FULL, refresh=True)]
        if name == "ecm":
            steps = [CmStep("continuum")]
            if has_line:
                steps.append(CmStep("line"))
            if has_abs:
                steps.append(CmStep("absorption"))
            return steps
        if name == "ecme":
            if not isinstance(self.template.line, GaussianLine):
                return self.plan("ecm")
            steps = [CmStep("line_shape"), CmStep("continuum")]
            if has_abs:
                steps.append(CmStep("absorption"))
            return steps + [CmStep("mu", AugLevel.OBSERVED)]
        if name == "aecm":
            first = "continuum+absorption" if has_abs else "continuum"
            steps = [CmStep(first, AugLevel.FULL)]
            if has_line:
                steps.append(CmStep("line", AugLevel.REDUCED, refresh=True))
            return steps
        raise ValueError(f"no default plan for {name!r}")

    def outer_e_step(self, theta):
        """Expected level-5 and level-4 counts (background removal and deblurring)."""
        if self._outer[0] is not theta:
            self._outer = (theta, aug.outer_expectation(theta, self.grid, self.rsp, self.data,
                                                        xi=self._expected(theta)))
        return self._outer[1]

    def e_step(self, theta, level: AugLevel = AugLevel.FULL):
        y_plus, ydot_plus = self.outer_e_step(theta)
        return aug.inner_expectations(theta, self.grid, ydot_plus,
                                      self.resolve_working(theta, level), y_plus)

    def inner_problem(self, outer) -> "InnerSpectralProblem":
        return InnerSpectralProblem(self, *outer)

    def impute(self, theta, level, seed):
        return aug.impute_full(theta, self.grid, self.rsp, self.data,
                               self.resolve_working(theta, level), seed)

    def average(self, draws):
        return average_counts(draws)

    def _observed_mu(self, theta: SpectralParams) -> SpectralParams:
        """Maximise the observed-data posterior over the line centre."""
        line = theta.line
        if not isinstance(line, GaussianLine) or line.nu == 0:
            return theta
        lo, hi = self.grid.edges[0], self.grid.edges[-1]

        def f(mu):
            t = theta.replace(line=replace(line, mu=float(mu)))
            try:
                return self.loglik(t)
            except DomainError:
                return -np.inf

        cur = f(line.mu)
        grid = np.concatenate([self.grid.mean_energies, self.grid.edges])
        vals = np.array([f(m) for m in grid])
        k = int(np.argmax(vals))
        best_mu, best = (line.mu, cur) if cur >= vals[k] else (grid[k], vals[k])
        step = max(float(np.max(self.grid.widths)), line.sigma)
        res = optimize.minimize_scalar(lambda m: -f(m), bounds=(max(lo, best_mu - step),
                                       min(hi, best_mu + step)), method="bounded",
                                       options={"xatol": 1e-10})
        if res.success and -res.fun > best:
            best_mu, best = float(res.x), -res.fun
        if best > cur:
            return theta.replace(line=replace(line, mu=float(best_mu)))
        return theta


class InnerSpectralProblem(_SpectralBlocks):
    """Fitting problem whose observed data are the expected ideal-bin counts
    of an outer E-step.

    Its objective equals the outer expected complete-data log posterior up to
    a constant, so any ascent here is an ascent of the outer problem.
    """

    def __init__(self, outer: SpectralProblem, y_plus, ydot_plus):
        self.outer = outer
        self.grid = outer.grid
        self.newton_steps = outer.newton_steps
        self.labels = outer.labels
        self.y_plus = y_plus
        self.ydot_plus = np.asarray(ydot_plus, dtype=float)

    def loglik(self, theta) -> float:
        lam = bin_intensity(theta, self.grid) * transmission(theta.absorption, self.grid)
        if np.any((lam <= 0) & (self.ydot_plus > 0)):
            return -np.inf
        return float(np.sum(xlogy(self.ydot_plus, lam) - lam)) + log_prior(theta)

    def plan(self, name: str):
        return self.outer.plan(name)

    def e_step(self, theta, level: AugLevel = AugLevel.FULL):
        return aug.inner_expectations(theta, self.grid, self.ydot_plus,
                                      self.outer.resolve_working(theta, level), self.y_plus)


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------

class SpectralSampler:
    """Parameter draws given fully augmented counts, for DA and Gibbs.

    Flat priors restricted to a box keep the posterior proper.  The line
    intensity and power-law amplitude have Gamma conditionals; the line
    shape, power-law index and absorption scale use random-walk Metropolis
    steps whose scales adapt towards 20-50% acceptance during the first
    ``adapt_iters`` parameter draws only.  The line width is sampled on the
    log scale with a flat prior there.
    """

    BLOCKS = ("aug", "line", "continuum", "absorption")

    def __init__(self, problem: SpectralProblem, adapt_iters: int = 1000,
                 beta_range=(-10.0, 10.0), xi_max: float = 50.0):
        self.problem = problem
        self.grid = problem.grid
        self.labels = problem.labels
        self.adapt_iters = adapt_iters
        self.beta_range = beta_range
        self.xi_max = xi_max
        span = self.grid.edges[-1] - self.grid.edges[0]
        self.log_sigma_range = (0.5 * math.log(self.grid.sigma2_min), math.log(span))
        self.scales = {"line": np.array([0.05, 0.05]), "beta": 0.05, "xi": 0.05, "theta": 0.1}
        self.counts = {k: [0, 0] for k in self.scales}
        self.totals = {k: [0, 0] for k in self.scales}
        self.calls = 0

    # helpers -------------------------------------------------------------
    def _mh(self, key, logp, x, rng):
        sc = self.scales[key]
        prop = x + sc * rng.standard_normal(np.shape(x)) if np.ndim(x) else x + sc * rng.standard_normal()
        lp_new = logp(prop)
        lp_old = logp(x)
        accept = np.isfinite(lp_new) and math.log(rng.uniform()) < lp_new - lp_old
        self.counts[key][0] += accept
        self.counts[key][1] += 1
        self.totals[key][0] += accept
        self.totals[key][1] += 1
        return prop if accept else x

    def _adapt(self):
        self.calls += 1
        if self.calls > self.adapt_iters or self.calls % 50:
            return
        for key, (acc, tot) in self.counts.items():
            if tot:
                rate = acc / tot
                if rate < 0.2:
                    self.scales[key] = self.scales[key] * 0.7
                elif rate > 0.5:
                    self.scales[key] = self.scales[key] * 1.4
            self.counts[key] = [0, 0]

    def acceptance(self) -> dict:
        return {k: (a / t if t else float("nan")) for k, (a, t) in self.totals.items()}

    # block draws ---------------------------------------------------------
    def draw_line(self, counts, line, rng):
        if line is None:
            return None
        w = np.asarray(counts.yddot_l, dtype=float)
        c = np.asarray(counts.scale_l, dtype=float)
        if isinstance(line, DeltaLine):
            return DeltaLine(float(rng.gamma(w.sum() + 1.0) / c[line.bin]), line.bin)
        lo, hi = self.grid.edges[0], self.grid.edges[-1]
        s_lo, s_hi = self.log_sigma_range
        nu = line.nu

        def logp(x):
            mu, s = x
            if not (lo <= mu <= hi and s_lo <= s <= s_hi):
                return -np.inf
            p = line_bin_probs(GaussianLine(1.0, mu, math.exp(2 * s)), self.grid)
            if np.any((p <= 0) & (w > 0)):
                return -np.inf
            return float(np.sum(xlogy(w, p))) - nu * float(np.dot(c, p))

        x = np.array([line.mu, 0.5 * math.log(line.sigma2)])
        mu, s = self._mh("line", logp, x, rng)
        p = line_bin_probs(GaussianLine(1.0, mu, math.exp(2 * s)), self.grid)
        nu = float(rng.gamma(w.sum() + 1.0) / np.dot(c, p))
        return GaussianLine(nu, float(mu), float(math.exp(2 * s)))

    def draw_continuum(self, counts, cont, rng):
        w = np.asarray(counts.yddot_c, dtype=float)
        c = np.asarray(counts.scale_c, dtype=float)
        if isinstance(cont, PowerLaw):
            logE = np.log(self.grid.mean_energies)
            base = c * self.grid.widths
            b_lo, b_hi = self.beta_range

            def logp(beta):
                if not b_lo <= beta <= b_hi:
                    return -np.inf
                # gamma integrated out under its flat prior
                S = float(np.dot(base, np.exp(-beta * logE)))
                return -beta * float(np.dot(w, logE)) - (w.sum() + 1.0) * math.log(S)

            beta = float(self._mh("beta", logp, cont.beta, rng))
            S = float(np.dot(base, np.exp(-beta * logE)))
            return PowerLaw(float(rng.gamma(w.sum() + 1.0) / S), beta)
        rate = c * self.grid.widths
        theta = cont.theta.copy()
        if not np.any(cont.omega > 0):
            return FreeContinuum(rng.gamma(w + 1.0) / rate, cont.omega)
        om = cont.omega
        J = theta.size
        for j in range(J):
            def logp(t, j=j):
                if t <= 0:
                    return -np.inf
                v = xlogy(w[j], t) - rate[j] * t
                if j > 0:
                    v -= 0.5 * om[j - 1] * (t - theta[j - 1]) ** 2
                if j < J - 1:
                    v -= 0.5 * om[j] * (theta[j + 1] - t) ** 2
                return float(v)
            sc = self.scales["theta"]
            self.scales["theta"] = sc * max(theta[j], 1e-3)
            theta[j] = self._mh("theta", logp, theta[j], rng)
            self.scales["theta"] = sc
        return FreeContinuum(theta, om)

    def draw_absorption(self, counts, absorption, rng):
        if absorption.xi is None:
            return absorption
        from .spectral import absorption_objective
        d = absorption.effective_area

        def logp(xi):
            if not 0.0 <= xi <= self.xi_max:
                return -np.inf
            return absorption_objective(counts, self.grid, xi, d)

        xi = float(self._mh("xi", logp, absorption.xi, rng))
        return Absorption(absorption.effective_area, xi)

    # DA contract ---------------------------------------------------------
    def sample_augmented(self, theta, rng):
        return self.problem.impute(theta, AugLevel.FULL, int(rng.integers(2 ** 63)))

    def sample_params(self, counts, theta, rng):
        line = self.draw_line(counts, theta.line, rng)
        cont = self.draw_continuum(counts, theta.continuum, rng)
        absorption = self.draw_absorption(counts, theta.absorption, rng)
        self._adapt()
        return theta.replace(line=line, continuum=cont, absorption=absorption)

    def record(self, theta) -> np.ndarray:
        if isinstance(theta, dict):
            theta = self._params(theta)
        return param_vector(theta)

    # Gibbs contract --------------------------------------------------------
    def initial_state(self, theta0: SpectralParams) -> dict:
        return {"aug": None, "line": theta0.line, "continuum": theta0.continuum,
                "absorption": theta0.absorption}

    def _params(self, state) -> SpectralParams:
        return SpectralParams(state["continuum"], state["line"], state["absorption"],
                              self.problem.template.background)

    def conditional_draw(self, draws, given, state, rng) -> dict:
        draws = tuple(draws)
        if set(draws) | set(given) != set(self.BLOCKS):
            raise ValueError("spectral sampler supports full conditionals only")
        out = {}
        if "aug" in draws:
            if len(draws) != 1:
                raise ValueError("augmented counts are drawn on their own")
            return {"aug": self.sample_augmented(self._params(state), rng)}
        counts = state["aug"]
        if counts is None:
            raise ValueError("draw the augmented counts first")
        if "line" in draws:
            out["line"] = self.draw_line(counts, state["line"], rng)
        if "continuum" in draws:
            out["continuum"] = self.draw_continuum(counts, state["continuum"], rng)
        if "absorption" in draws:
            out["absorption"] = self.draw_absorption(counts, state["absorption"], rng)
        if "continuum" in draws:
            self._adapt()
        return out
