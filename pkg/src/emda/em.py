"""Deterministic EM-type drivers over a generic problem contract.

A problem supplies

* ``loglik(theta)``: observed-data log posterior,
* ``e_step(theta, aug)``: sufficient statistics under augmentation ``aug``,
* ``project(theta, block, stats)``: conditional maximisation of one block
  (``stats`` is ``None`` for steps on the observed-data posterior),
* ``vector(theta)`` and ``labels``: a flat view of the parameters,
* ``plan(name)``: default CM-step lists for ``"em"``, ``"ecm"``, ...

and optionally ``impute`` / ``average`` (Monte Carlo EM),
``outer_e_step`` / ``inner_problem`` (nested EM), ``with_working``
(conditional augmentation) and ``px_maximize`` (parameter expansion).
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional, Sequence

import numpy as np


class AugLevel(IntEnum):
    """Amount of augmented data a CM-step conditions on (more is larger)."""

    OBSERVED = 0
    REDUCED = 1
    FULL = 2

    @classmethod
    def parse(cls, text: str) -> "AugLevel":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown augmentation level {text!r}") from None


@dataclass(frozen=True)
class CmStep:
    """One conditional maximisation: block name, augmentation, and whether the
    E-step is recomputed at the current iterate before this step."""

    block: str
    aug: AugLevel = AugLevel.FULL
    refresh: bool = False

    def __str__(self):
        return f"{self.block}[{self.aug.name.lower()}{', refresh' if self.refresh else ''}]"


class NonMonotoneError(RuntimeError):
    """A monotone algorithm decreased the log posterior."""


class OrderingError(ValueError):
    """CM-step plan violates the augmentation ordering rule."""

    def __init__(self, report: "OrderingReport"):
        super().__init__(report.message)
        self.report = report


@dataclass(frozen=True)
class OrderingReport:
    ok: bool
    offending: Optional[tuple] = None
    message: str = "ok"


def validate_ordering(cm_steps: Sequence[CmStep]) -> OrderingReport:
    """Check that between E-step recomputations the steps never move to a
    larger augmentation.

    A segment starts at the beginning of the cycle and at every step with
    ``refresh=True``.
    """
    prev = None
    for k, step in enumerate(cm_steps):
        if prev is not None and not step.refresh and step.aug > prev[1].aug:
            a, earlier = prev
            msg = (f"step {k + 1} ({step}) uses more augmentation than step "
                   f"{a + 1} ({earlier}) without recomputing the E-step")
            return OrderingReport(False, (a, k), msg)
        prev = (k, step)
    return OrderingReport(True)


@dataclass
class EmOptions:
    max_iter: int = 1000
    tol: float = 1e-8
    inner_iters: int = 4
    mc_size: int = 100
    seed: int = 0
    slack: float = 1e-10
    min_iter: int = 0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class Trace:
    """Per-iteration record of an EM-type run; row 0 is the starting point."""

    algorithm: str
    labels: list
    iters: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    params: list = field(default_factory=list)
    converged: bool = False
    theta: object = None
    boundary: list = field(default_factory=list)

    def record(self, it, seconds, ll, vec, boundary=False):
        self.iters.append(it)
        self.seconds.append(seconds)
        self.loglik.append(ll)
        self.params.append(np.asarray(vec, dtype=float).copy())
        self.boundary.append(bool(boundary))

    @property
    def iterations(self) -> int:
        return self.iters[-1] if self.iters else 0

    @property
    def final_loglik(self) -> float:
        return self.loglik[-1]

    @property
    def elapsed(self) -> float:
        return self.seconds[-1]

    def param_matrix(self) -> np.ndarray:
        return np.vstack(self.params)

    def is_monotone(self, slack: float = 1e-10) -> bool:
        ll = np.asarray(self.loglik)
        return bool(np.all(np.diff(ll) >= -slack))

    def rows(self, with_seconds: bool = True):
        for it, sec, ll, p in zip(self.iters, self.seconds, self.loglik, self.params):
            yield [it, sec if with_seconds else 0.0, ll, *p]

    def to_csv(self, path=None, with_seconds: bool = True) -> str:
        """CSV ``iter,seconds,loglik,<labels>``; returned and optionally written."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "seconds", "loglik", *self.labels])
        for row in self.rows(with_seconds):
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


@dataclass(frozen=True)
class RateEstimate:
    rho_hat: float
    window: tuple
    reliable: bool
    ratios: tuple = ()


# --------------------------------------------------------------------------
# Core loop
# --------------------------------------------------------------------------

def _rel_change(a: np.ndarray, b: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(b - a) / (1.0 + np.abs(a))))


def _drive(problem, theta0, opts: EmOptions, name: str,
           iterate: Callable, monotone: bool = True, tol_scale: float = 1.0) -> Trace:
    """Run ``iterate(theta, k) -> (theta, boundary)`` to convergence."""
    trace = Trace(name, list(problem.labels))
    tol = opts.tol * tol_scale
    start = time.perf_counter()
    theta = theta0
    ll = problem.loglik(theta)
    vec = problem.vector(theta)
    trace.record(0, 0.0, ll, vec)
    quiet = 0
    for k in range(1, opts.max_iter + 1):
        theta, boundary = iterate(theta, k)
        ll_new = problem.loglik(theta)
        vec_new = problem.vector(theta)
        trace.record(k, time.perf_counter() - start, ll_new, vec_new, boundary)
        if not np.isfinite(ll_new):
            raise NonMonotoneError(f"{name}: non-finite log posterior at iteration {k}")
        if monotone and ll_new < ll - opts.slack:
            raise NonMonotoneError(
                f"{name}: log posterior decreased by {ll - ll_new:.3e} at iteration {k}")
        small = (abs(ll_new - ll) / max(1.0, abs(ll)) < tol
                 and _rel_change(vec, vec_new) < tol)
        quiet = quiet + 1 if small else 0
        ll, vec = ll_new, vec_new
        if quiet >= 2 and k >= opts.min_iter:
            trace.converged = True
            break
    trace.theta = theta
    return trace


def aecm_cycle(problem, theta, steps: Sequence[CmStep]):
    """One pass over ``steps``.

    Statistics for each augmentation level are computed lazily at the
    iterate that opened the current segment, so steps sharing a segment share
    one E-step.
    """
    cache = {}
    seg_theta = theta
    for k, step in enumerate(steps):
        if step.refresh and k > 0:
            cache.clear()
            seg_theta = theta
        if step.aug == AugLevel.OBSERVED:
            stats = None
        else:
            if step.aug not in cache:
                cache[step.aug] = problem.e_step(seg_theta, step.aug)
            stats = cache[step.aug]
        theta = problem.project(theta, step.block, stats)
    return theta


def _checked(steps):
    rep = validate_ordering(steps)
    if not rep.ok:
        raise OrderingError(rep)
    return list(steps)


# --------------------------------------------------------------------------
# Drivers
# --------------------------------------------------------------------------

def run_em(problem, theta0, opts: EmOptions = None) -> Trace:
    """E-step under full augmentation followed by a full M-step."""
    opts = opts or EmOptions()
    steps = list(problem.plan("em"))
    if len(steps) != 1 or steps[0].aug != AugLevel.FULL:
        raise ValueError("EM needs a single M-step on the full augmentation")
    return _drive(problem, theta0, opts, "em",
                  lambda th, k: (aecm_cycle(problem, th, steps), False))


def run_ecm(problem, theta0, opts: EmOptions = None, steps=None) -> Trace:
    """One E-step then a cycle of conditional maximisations."""
    opts = opts or EmOptions()
    steps = list(problem.plan("ecm") if steps is None else steps)
    if any(s.aug != AugLevel.FULL or s.refresh for s in steps):
        raise ValueError("ECM steps must all condition on the full augmentation")
    return _drive(problem, theta0, opts, "ecm",
                  lambda th, k: (aecm_cycle(problem, th, steps), False))


def run_ecme(problem, theta0, opts: EmOptions = None, steps=None) -> Trace:
    """ECM with some steps maximising the observed-data posterior directly."""
    opts = opts or EmOptions()
    steps = _checked(problem.plan("ecme") if steps is None else steps)
    if any(s.aug == AugLevel.REDUCED for s in steps):
        raise ValueError("ECME steps are full-augmentation or observed-data only")
    return _drive(problem, theta0, opts, "ecme",
                  lambda th, k: (aecm_cycle(problem, th, steps), False))


def run_aecm(problem, theta0, opts: EmOptions = None, steps=None) -> Trace:
    """CM-steps with their own augmentation levels; the plan is validated first."""
    opts = opts or EmOptions()
    steps = _checked(problem.plan("aecm") if steps is None else steps)
    return _drive(problem, theta0, opts, "aecm",
                  lambda th, k: (aecm_cycle(problem, th, steps), False))


def _inner_loop(problem, theta, n_inner: int, slack: float):
    outer = problem.outer_e_step(theta)
    inner = problem.inner_problem(outer)
    steps = _checked(inner.plan("em"))
    ll = inner.loglik(theta)
    for _ in range(n_inner):
        theta = aecm_cycle(inner, theta, steps)
    # The inner objective equals the outer Q-function, so one check across
    # the whole inner run certifies the outer GEM step.
    ll_new = inner.loglik(theta)
    if ll_new < ll - slack * max(1.0, abs(ll)):
        raise NonMonotoneError(f"inner iterations decreased their objective by {ll - ll_new:.3e}")
    return theta


def run_nested_em(problem, theta0, opts: EmOptions = None) -> Trace:
    """Outer E-step on a partial augmentation, then ``inner_iters`` inner EM
    iterations that act as the outer M-step."""
    opts = opts or EmOptions()
    name = "nested_em" if getattr(problem, "working", None) is None else "cda_em+nested"
    return _drive(problem, theta0, opts, name,
                  lambda th, k: (_inner_loop(problem, th, opts.inner_iters, opts.slack), False))


def run_cda_em(problem, working, theta0, opts: EmOptions = None) -> Trace:
    """EM on the augmentation indexed by the fixed working value ``working``."""
    opts = opts or EmOptions()
    wp = problem.with_working(working)
    if hasattr(wp, "outer_e_step"):
        step = lambda th, k: (_inner_loop(wp, th, 1, opts.slack), False)  # noqa: E731
    else:
        steps = _checked(wp.plan("em"))
        step = lambda th, k: (aecm_cycle(wp, th, steps), False)  # noqa: E731
    trace = _drive(wp, theta0, opts, "cda_em", step)
    return trace


def run_mcem(problem, theta0, opts: EmOptions = None) -> Trace:
    """EM with the E-step replaced by an average over ``mc_size`` imputations."""
    opts = opts or EmOptions()
    if opts.mc_size < 2:
        raise ValueError("mc_size must be >= 2")
    steps = list(problem.plan("em"))
    root = np.random.SeedSequence(opts.seed)

    def step(theta, k):
        seeds = np.random.SeedSequence(root.entropy, spawn_key=(k,)).spawn(opts.mc_size)
        draws = [problem.impute(theta, AugLevel.FULL, s) for s in seeds]
        stats = problem.average(draws)
        for s in steps:
            theta = problem.project(theta, s.block, stats)
        return theta, False

    return _drive(problem, theta0, opts, "mcem", step, monotone=False, tol_scale=3.0)


def run_pxem(problem_px, theta0, opts: EmOptions = None) -> Trace:
    """Parameter-expanded EM.

    The E-step is taken at the identity working value; ``px_maximize``
    maximises the expanded objective jointly over the parameter and the
    working parameter and returns ``(theta, alpha, at_boundary)``.
    """
    opts = opts or EmOptions()

    def step(theta, k):
        stats = problem_px.e_step(theta, AugLevel.FULL)
        theta, _alpha, boundary = problem_px.px_maximize(theta, stats)
        return theta, boundary

    return _drive(problem_px, theta0, opts, "pxem", step)


# --------------------------------------------------------------------------
# Rate diagnostics
# --------------------------------------------------------------------------

def estimate_rate(trace: Trace, theta_star, window: int = 10,
                  floor: float = 1e-12) -> RateEstimate:
    """Empirical global rate from iterate ratios
    ``|theta(t+1) - theta*| / |theta(t) - theta*|`` (sup norm on
    parameters scaled by ``1 + |theta*|``).

    Uses the last ``window`` ratios before the error reaches round-off.
    Flagged unreliable with fewer than 5 ratios or a coefficient of variation
    of at least 0.2.
    """
    P = trace.param_matrix()
    star = np.asarray(theta_star, dtype=float)
    err = np.max(np.abs(P - star) / (1.0 + np.abs(star)), axis=1)
    usable = np.nonzero(err > floor)[0]
    if usable.size < 2:
        if usable.size <= 1 and err.size >= 2 and err[-1] <= floor:
            # Converged exactly (e.g. in one step): rate zero.
            return RateEstimate(0.0, (0, int(err.size) - 1), err.size >= 2, ())
        raise ValueError("trace too short to estimate a rate")
    last = usable[-1]
    ratios = []
    for t in range(last - 1, -1, -1):
        if err[t] <= floor:
            break
        ratios.append(err[t + 1] / err[t])
        if len(ratios) == window:
            break
    ratios = ratios[::-1]
    if not ratios:
        raise ValueError("trace too short to estimate a rate")
    r = np.asarray(ratios)
    rho = float(np.exp(np.mean(np.log(np.maximum(r, 1e-300)))))
    cv = float(np.std(r) / np.mean(r)) if np.mean(r) > 0 else math.inf
    reliable = r.size >= 5 and cv < 0.2
    return RateEstimate(rho, (int(last - r.size), int(last)), reliable, tuple(float(x) for x in r))


ALGORITHMS = ("em", "ecm", "ecme", "aecm", "nested_em", "mcem", "cda_em", "cda_em+nested", "pxem")
