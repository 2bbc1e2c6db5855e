"""Markov chain samplers over generic problems, plan validation and chain
diagnostics.

Samplers that follow a plan work on a dictionary state.  Each plan step
draws the variables in ``draws`` from their conditional given ``given``;
every other variable is integrated out of that draw.  A problem for these
samplers provides ``initial_state``, ``conditional_draw(draws, given,
state, rng)``, ``record(state)`` and ``labels``.

The data augmentation sampler instead uses ``sample_augmented(theta, rng)``
and ``sample_params(aug, theta, rng)``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import fft as sfft


class PlanViolation(ValueError):
    def __init__(self, report: "PlanReport"):
        super().__init__(report.message)
        self.report = report


class ChainError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlanStep:
    draws: tuple
    given: tuple = ()
    marg: tuple = ()
    inner: bool = False

    def __post_init__(self):
        object.__setattr__(self, "draws", tuple(self.draws))
        object.__setattr__(self, "given", tuple(self.given))
        object.__setattr__(self, "marg", tuple(self.marg))
        if not self.draws:
            raise ValueError("a step must draw at least one variable")

    def __str__(self):
        s = f"draw:{','.join(self.draws)}"
        if self.given:
            s += f" given:{','.join(self.given)}"
        if self.marg:
            s += f" marg:{','.join(self.marg)}"
        return s + (" inner" if self.inner else "")


@dataclass(frozen=True)
class SamplerPlan:
    steps: tuple
    variables: tuple = None

    def __post_init__(self):
        steps = tuple(self.steps)
        object.__setattr__(self, "steps", steps)
        if self.variables is None:
            seen = []
            for s in steps:
                for v in s.draws + s.given + s.marg:
                    if v not in seen:
                        seen.append(v)
            object.__setattr__(self, "variables", tuple(seen))
        else:
            object.__setattr__(self, "variables", tuple(self.variables))

    def __len__(self):
        return len(self.steps)

    def is_pure_gibbs(self) -> bool:
        """Every step conditions on all variables it does not draw."""
        allv = set(self.variables)
        return all(set(s.draws) | set(s.given) == allv for s in self.steps)

    @classmethod
    def gibbs(cls, blocks: Sequence[Sequence[str]]) -> "SamplerPlan":
        allv = [v for b in blocks for v in b]
        return cls(tuple(PlanStep(tuple(b), tuple(v for v in allv if v not in b))
                         for b in blocks), tuple(allv))


@dataclass(frozen=True)
class PlanReport:
    ok: bool
    step: Optional[int] = None
    message: str = "ok"


def validate_pcg_plan(plan: SamplerPlan) -> PlanReport:
    """Structural check that a (possibly partially collapsed) plan keeps the
    target distribution.

    A variable left out of a step (neither drawn nor conditioned on) is
    integrated out of that draw, so its current value no longer matches the
    freshly drawn ones.  It must be redrawn before any later step conditions
    on it and before the cycle ends.  Steps must also not draw a variable
    they condition on or integrate out, and the cycle must draw every
    variable.
    """
    allv = set(plan.variables)
    stale: dict = {}
    for k, step in enumerate(plan.steps):
        d, g, m = set(step.draws), set(step.given), set(step.marg)
        if d & g:
            return PlanReport(False, k, f"step {k + 1} ({step}) draws a variable it conditions on")
        if m & g:
            return PlanReport(False, k, f"step {k + 1} ({step}) conditions on a variable it integrates out")
        if m & d:
            return PlanReport(False, k, f"step {k + 1} ({step}) draws a variable it integrates out")
        bad = sorted(v for v in g if v in stale)
        if bad:
            src = stale[bad[0]]
            return PlanReport(False, k, f"step {k + 1} ({step}) conditions on {bad[0]}, which step "
                                        f"{src + 1} integrated out and nothing has redrawn")
        for v in d:
            stale.pop(v, None)
        for v in allv - d - g:
            stale[v] = k
    missing = allv - {v for s in plan.steps for v in s.draws}
    if missing:
        return PlanReport(False, None, f"no step draws {sorted(missing)}")
    if stale:
        v = sorted(stale)[0]
        return PlanReport(False, stale[v], f"{v} is integrated out by step {stale[v] + 1} and not "
                                           f"redrawn before the cycle ends")
    return PlanReport(True)


@dataclass
class ChainOutput:
    draws: np.ndarray
    labels: tuple
    seed: object
    burn_in: int
    accept: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.draws.shape[0] < self.burn_in:
            raise ValueError("chain shorter than burn-in")

    @property
    def kept(self) -> np.ndarray:
        return self.draws[self.burn_in:]

    def column(self, name: str, kept: bool = True) -> np.ndarray:
        d = self.kept if kept else self.draws
        return d[:, list(self.labels).index(name)]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", *self.labels])
        for k, row in enumerate(self.draws, start=1):
            w.writerow([k, *(repr(float(x)) for x in row)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _chain_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def _default_burn(iters, burn_in):
    return int(0.2 * iters) if burn_in is None else int(burn_in)


def _check(vec, k):
    if not np.all(np.isfinite(vec)):
        raise ChainError(f"non-finite draw at iteration {k}")


# --------------------------------------------------------------------------
# Samplers
# --------------------------------------------------------------------------

def _da_step(problem, theta, rng):
    aug = problem.sample_augmented(theta, rng)
    return problem.sample_params(aug, theta, rng)


def run_da(problem, theta0, iters: int, seed, burn_in: int = None) -> ChainOutput:
    """Alternate an imputation of the missing data and a parameter draw."""
    rng = _chain_rng(seed)
    theta = theta0
    out = np.empty((iters, len(problem.labels)))
    for k in range(iters):
        theta = _da_step(problem, theta, rng)
        out[k] = problem.record(theta)
        _check(out[k], k + 1)
    return ChainOutput(out, tuple(problem.labels), seed, _default_burn(iters, burn_in),
                       dict(getattr(problem, "acceptance", lambda: {})()))


def _run_steps(problem, steps, state, rng):
    for s in steps:
        state.update(problem.conditional_draw(s.draws, s.given, state, rng))


def _run_plan(problem, plan, theta0, iters, seed, burn_in, inner_n=1):
    rng = _chain_rng(seed)
    state = problem.initial_state(theta0)
    idx = [k for k, s in enumerate(plan.steps) if s.inner]
    if idx and idx != list(range(idx[0], idx[-1] + 1)):
        raise ValueError("inner steps must be contiguous")
    head = plan.steps[:idx[0]] if idx else plan.steps
    inner = plan.steps[idx[0]:idx[-1] + 1] if idx else ()
    tail = plan.steps[idx[-1] + 1:] if idx else ()
    out = np.empty((iters, len(problem.labels)))
    for k in range(iters):
        _run_steps(problem, head, state, rng)
        for _ in range(inner_n):
            _run_steps(problem, inner, state, rng)
        _run_steps(problem, tail, state, rng)
        out[k] = problem.record(state)
        _check(out[k], k + 1)
    return ChainOutput(out, tuple(problem.labels), seed, _default_burn(iters, burn_in),
                       dict(getattr(problem, "acceptance", lambda: {})()))


def run_gibbs(problem, plan: SamplerPlan, theta0, iters: int, seed,
              burn_in: int = None) -> ChainOutput:
    """Cycle through full conditionals in plan order."""
    if not plan.is_pure_gibbs():
        raise ValueError("Gibbs plans must condition each step on every other variable")
    return _run_plan(problem, plan, theta0, iters, seed, burn_in)


def run_partially_blocked(problem, plan: SamplerPlan, inner_n: int, theta0, iters: int,
                          seed, burn_in: int = None) -> ChainOutput:
    """Gibbs sampler whose ``inner`` steps are repeated ``inner_n`` times per
    pass of the remaining (expensive) steps."""
    if inner_n < 1:
        raise ValueError("inner_n must be >= 1")
    if not plan.is_pure_gibbs():
        raise ValueError("partially blocked plans use full conditionals")
    return _run_plan(problem, plan, theta0, iters, seed, burn_in, inner_n)


def run_pcg(problem, plan: SamplerPlan, theta0, iters: int, seed, burn_in: int = None,
            validate: bool = True) -> ChainOutput:
    """Partially collapsed Gibbs sampler.  Plans are validated first;
    ``validate=False`` exists only to demonstrate what an invalid plan does."""
    if validate:
        rep = validate_pcg_plan(plan)
        if not rep.ok:
            raise PlanViolation(rep)
    return _run_plan(problem, plan, theta0, iters, seed, burn_in)


@dataclass(frozen=True)
class NormalWorkingPrior:
    """``alpha ~ N(0, scale^2)``; ``scale = 0`` is a point mass at zero."""

    scale: float

    @property
    def proper(self) -> bool:
        return math.isfinite(self.scale) and self.scale >= 0

    @property
    def point_mass(self) -> bool:
        return self.scale == 0


def run_marginal_aug(problem_ma, working_prior: NormalWorkingPrior, theta0, iters: int,
                     seed, burn_in: int = None) -> ChainOutput:
    """Marginal augmentation: draw ``(augmented data, alpha)`` given theta with
    alpha from the working prior, then ``(theta, alpha)`` jointly given the
    augmented data, discarding alpha."""
    if not working_prior.proper:
        raise ValueError("improper working prior refused")
    if working_prior.point_mass:
        return run_da(problem_ma, theta0, iters, seed, burn_in)
    tau = working_prior.scale
    rng = _chain_rng(seed)
    theta = theta0
    out = np.empty((iters, len(problem_ma.labels)))
    for k in range(iters):
        z, _ = problem_ma.sample_expanded(theta, tau, rng)
        theta, _ = problem_ma.sample_expanded_params(z, tau, rng)
        out[k] = problem_ma.record(theta)
        _check(out[k], k + 1)
    return ChainOutput(out, tuple(problem_ma.labels), seed, _default_burn(iters, burn_in))


# --------------------------------------------------------------------------
# Diagnostics
# --------------------------------------------------------------------------

def autocorr(x: np.ndarray, max_lag: int = None) -> np.ndarray:
    """Sample autocorrelation function via FFT (lag 0 is exactly one)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    var = float(np.dot(xc, xc))
    if var == 0:
        raise ValueError("constant chain")
    size = sfft.next_fast_len(2 * n)
    f = sfft.rfft(xc, size)
    acov = sfft.irfft(f * np.conj(f), size)[:n]
    rho = acov / acov[0]
    rho[0] = 1.0
    return rho if max_lag is None else rho[:max_lag + 1]


def ess(x: np.ndarray) -> float:
    """Effective sample size with Geyer's initial positive sequence."""
    n = len(x)
    rho = autocorr(x)
    total = 0.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        total += pair
    tau = max(2.0 * total - 1.0, 1.0 / n)
    return float(min(n / tau, n))


def mc_se(x: np.ndarray) -> float:
    """Monte Carlo standard error of the mean of ``x``."""
    x = np.asarray(x, dtype=float)
    return float(np.std(x, ddof=1) / math.sqrt(ess(x)))


@dataclass
class Diagnostics:
    labels: tuple
    lag1: np.ndarray
    ess: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    se: np.ndarray
    max_lag1_h: float = float("nan")
    constant: tuple = ()
    acf: list = field(default_factory=list)

    def report(self) -> str:
        lines = [f"{'variable':<14}{'mean':>14}{'sd':>12}{'mc_se':>12}{'lag1':>10}{'ess':>12}"]
        for k, name in enumerate(self.labels):
            lines.append(f"{name:<14}{self.mean[k]:>14.6g}{self.sd[k]:>12.5g}{self.se[k]:>12.4g}"
                         f"{self.lag1[k]:>10.4f}{self.ess[k]:>12.1f}")
        if not math.isnan(self.max_lag1_h):
            lines.append(f"max lag-1 autocorrelation over test functions: {self.max_lag1_h:.4f}")
        if self.constant:
            lines.append(f"constant (ESS undefined): {', '.join(self.constant)}")
        return "\n".join(lines) + "\n"


def diagnostics(chain: ChainOutput, test_functions=None, max_lag: int = 50) -> Diagnostics:
    """Post-burn-in summaries; ``test_functions`` map a draw row to a scalar."""
    x = chain.kept
    if x.shape[0] <= 10:
        raise ValueError("chain too short after burn-in")
    k = x.shape[1]
    lag1, es, se = np.full(k, np.nan), np.full(k, np.nan), np.full(k, np.nan)
    acfs, const = [], []
    for j in range(k):
        col = x[:, j]
        if np.ptp(col) == 0:
            const.append(chain.labels[j])
            acfs.append(None)
            continue
        r = autocorr(col, max_lag)
        acfs.append(r)
        lag1[j] = r[1]
        es[j] = ess(col)
        se[j] = np.std(col, ddof=1) / math.sqrt(es[j])
    hmax = float("nan")
    if test_functions:
        vals = []
        for h in test_functions:
            hx = np.apply_along_axis(h, 1, x)
            if np.ptp(hx) > 0:
                vals.append(autocorr(hx, 1)[1])
        if vals:
            hmax = float(max(vals))
    return Diagnostics(tuple(chain.labels), lag1, es, x.mean(axis=0), x.std(axis=0, ddof=1), se,
                       hmax, tuple(const), acfs)


def parse_plan(text: str) -> SamplerPlan:
    """Parse ``draw:<vars> given:<vars> marg:<vars> [inner]`` lines.

    Blank lines and ``#`` comments are ignored.  Raises ``PlanParseError``
    carrying the 1-based line number.
    """
    steps = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = {"draw": (), "given": (), "marg": ()}
        inner = False
        for tok in line.split():
            if tok == "inner":
                inner = True
                continue
            key, sep, val = tok.partition(":")
            if not sep or key not in parts:
                raise PlanParseError(lineno, f"unrecognised token {tok!r}")
            parts[key] = tuple(v for v in val.split(",") if v)
        if not parts["draw"]:
            raise PlanParseError(lineno, "step has no draw: field")
        steps.append(PlanStep(parts["draw"], parts["given"], parts["marg"], inner))
    if not steps:
        raise PlanParseError(0, "empty plan")
    return SamplerPlan(tuple(steps))


class PlanParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
