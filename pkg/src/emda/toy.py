"""Analytic Gaussian problems used as exact oracles.

``GaussianToy`` has ``n`` observed and ``m`` missing draws from
``N(theta, 1/2)``; only the observed mean matters, so the observed-data log
likelihood is ``-n (theta - x_bar)^2``.  The missing values are augmented as
``Z_i = Y_i - alpha * theta`` with working parameter ``alpha``.

``GaussianFamilyToy`` is a multivariate normal target used to test Gibbs
samplers, including partially collapsed ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .em import AugLevel, CmStep


# --------------------------------------------------------------------------
# Missing-data Gaussian model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianToy:
    n: int
    m: int
    x_bar: float
    alpha: float = 0.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.m < 0:
            raise ValueError("m must be >= 0")

    labels = ("theta",)

    # closed forms ---------------------------------------------------------
    def loglik(self, theta) -> float:
        return -self.n * (float(theta) - self.x_bar) ** 2

    def i_aug(self, alpha: float = None) -> float:
        a = self.alpha if alpha is None else alpha
        return 2.0 * (self.n + self.m * (1.0 - a) ** 2)

    @property
    def i_obs(self) -> float:
        return 2.0 * self.n

    # problem contract -----------------------------------------------------
    def vector(self, theta) -> np.ndarray:
        return np.array([float(theta)])

    def plan(self, name: str):
        return [CmStep("theta", AugLevel.FULL)]

    def e_step(self, theta, aug=AugLevel.FULL) -> float:
        """Expected sum of the missing values on the working scale."""
        return self.m * (1.0 - self.alpha) * float(theta)

    def project(self, theta, block, stats):
        if stats is None:
            return float(self.x_bar)
        u = 1.0 - self.alpha
        return (self.n * self.x_bar + u * stats) / (self.n + self.m * u * u)

    def with_working(self, alpha: float) -> "GaussianToy":
        return replace(self, alpha=float(alpha))

    def impute(self, theta, aug, seed) -> float:
        rng = np.random.Generator(np.random.Philox(seed))
        u = 1.0 - self.alpha
        return float(np.sum(rng.normal(u * float(theta), math.sqrt(0.5), self.m)))

    def average(self, draws) -> float:
        return float(np.mean(draws))

    def px_maximize(self, theta, stats):
        """Joint maximiser over ``(theta, alpha)`` of the expanded objective
        built from statistics taken at ``alpha = 0``.

        Returns ``(theta, alpha, at_boundary)``; with ``x_bar = 0`` the
        supremum is approached as ``alpha -> -inf`` and the limit of the
        profile curve is returned.
        """
        n, m, xb = self.n, self.m, self.x_bar
        if m == 0 or stats == 0:
            return float(xb), (1.0 if m else 0.0), False
        if xb == 0:
            return 0.0, -math.inf, True
        return float(xb), 1.0 - stats / (m * xb), False

    # sampler contract -----------------------------------------------------
    def sample_augmented(self, theta, rng) -> float:
        """Sum of the missing values drawn given ``theta``."""
        return float(rng.normal(self.m * float(theta), math.sqrt(0.5 * self.m))) if self.m else 0.0

    def sample_params(self, aug_sum, theta, rng) -> float:
        tot = self.n + self.m
        return float(rng.normal((self.n * self.x_bar + aug_sum) / tot, math.sqrt(0.5 / tot)))

    def record(self, theta) -> np.ndarray:
        return np.array([float(theta)])

    def posterior(self) -> tuple[float, float]:
        """Mean and variance of the target ``p(theta | X)`` (flat prior)."""
        return float(self.x_bar), 0.5 / self.n

    def da_lag1(self) -> float:
        return self.m / (self.n + self.m)

    # marginal augmentation -----------------------------------------------
    def sample_expanded(self, theta, tau: float, rng):
        """Draw ``(sum Z, alpha)`` with ``alpha ~ N(0, tau^2)`` and ``Z = Y - alpha``."""
        alpha = float(rng.normal(0.0, tau))
        y_sum = float(rng.normal(self.m * float(theta), math.sqrt(0.5 * self.m))) if self.m else 0.0
        return y_sum - self.m * alpha, alpha

    def sample_expanded_params(self, z_sum: float, tau: float, rng):
        """Joint draw of ``(theta, alpha)`` given the transformed missing data."""
        n, m = self.n, self.m
        prec = np.array([[2.0 * (n + m), -2.0 * m], [-2.0 * m, 2.0 * m + 1.0 / tau ** 2]])
        lin = np.array([2.0 * n * self.x_bar + 2.0 * z_sum, -2.0 * z_sum])
        cov = np.linalg.inv(prec)
        mean = cov @ lin
        draw = mean + np.linalg.cholesky(cov) @ rng.standard_normal(2)
        return float(draw[0]), float(draw[1])


def q_value(toy: GaussianToy, theta: float, theta_t: float) -> float:
    """Expected complete-data log likelihood (up to a constant)."""
    return 2.0 * theta * (toy.n * toy.x_bar + toy.m * theta_t) - (toy.n + toy.m) * theta ** 2


def q_alpha_value(toy: GaussianToy, theta: float, alpha: float, theta_t: float,
                  alpha_prime: float) -> float:
    """Expected complete-data log likelihood with working parameters
    ``alpha`` (model) and ``alpha_prime`` (E-step)."""
    u = 1.0 - alpha
    return (2.0 * theta * (toy.n * toy.x_bar + toy.m * u * (1.0 - alpha_prime) * theta_t)
            - (toy.n + toy.m * u * u) * theta ** 2)


def pxem_profile(toy: GaussianToy, alpha: float, theta_t: float) -> float:
    """Maximiser over ``theta`` of the expanded objective at fixed ``alpha``
    (E-step taken at ``alpha = 0``)."""
    u = 1.0 - alpha
    den = toy.n + toy.m * u * u
    if not den > 0:
        raise ValueError("non-positive denominator")
    return (toy.n * toy.x_bar + toy.m * u * theta_t) / den


def analytic_rate(toy: GaussianToy, alpha: float = 0.0) -> float:
    """Global EM rate: one minus observed over augmented information."""
    u2 = (1.0 - alpha) ** 2
    return toy.m * u2 / (toy.n + toy.m * u2)


def cda_update(toy: GaussianToy, alpha: float, theta_t: float) -> float:
    u2 = (1.0 - alpha) ** 2
    return (toy.n * toy.x_bar + toy.m * u2 * theta_t) / (toy.n + toy.m * u2)


# --------------------------------------------------------------------------
# Multivariate normal family
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianFamilyToy:
    mean: np.ndarray
    cov: np.ndarray
    names: tuple = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size) or not np.allclose(cov, cov.T):
            raise ValueError("covariance must be square and symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance is not positive definite") from None
        names = tuple(self.names) if self.names else tuple(f"x{k + 1}" for k in range(mean.size))
        if len(names) != mean.size or len(set(names)) != len(names):
            raise ValueError("need one distinct name per coordinate")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "names", names)

    @property
    def dimension(self) -> int:
        return self.mean.size

    @property
    def labels(self):
        return self.names

    @classmethod
    def bivariate(cls, rho: float, names=("psi", "theta")) -> "GaussianFamilyToy":
        return cls(np.zeros(2), np.array([[1.0, rho], [rho, 1.0]]), names)

    @classmethod
    def trivariate(cls, rho_12: float = 0.5, cond_rho_23: float = 0.95,
                   names=("theta1", "theta2", "theta3")) -> "GaussianFamilyToy":
        """Unit-variance trivariate normal whose coordinates 2 and 3 have
        correlation ``cond_rho_23`` given coordinate 1; both correlate
        ``rho_12`` with coordinate 1."""
        r = rho_12
        resid = 1.0 - r * r
        c23 = r * r + cond_rho_23 * resid
        cov = np.array([[1.0, r, r], [r, 1.0, c23], [r, c23, 1.0]])
        return cls(np.zeros(3), cov, names)

    def index(self, variables) -> list:
        try:
            return [self.names.index(v) for v in variables]
        except ValueError as exc:
            raise KeyError(f"unknown variable in {list(variables)}") from exc

    def conditional_factors(self, block: Sequence[str], given: Sequence[str]):
        """``(A, b, L)`` with ``block | given ~ N(b + A x_given, L L^T)``."""
        key = (tuple(block), tuple(given))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        bi, gi = self.index(block), self.index(given)
        S_bb = self.cov[np.ix_(bi, bi)]
        if gi:
            S_bg = self.cov[np.ix_(bi, gi)]
            S_gg = self.cov[np.ix_(gi, gi)]
            try:
                A = np.linalg.solve(S_gg, S_bg.T).T
            except np.linalg.LinAlgError:
                raise ValueError("singular covariance in conditioning set") from None
            C = S_bb - A @ S_bg.T
            b = self.mean[bi] - A @ self.mean[gi]
        else:
            A = np.zeros((len(bi), 0))
            C = S_bb
            b = self.mean[bi].copy()
        C = 0.5 * (C + C.T)
        L = np.linalg.cholesky(C)
        out = (A, b, L)
        self._cache[key] = out
        return out

    # sampler contract -----------------------------------------------------
    def initial_state(self, theta0=None) -> dict:
        x = self.mean if theta0 is None else np.asarray(theta0, dtype=float)
        return {n: float(v) for n, v in zip(self.names, x)}

    def conditional_draw(self, draws, given, state, rng) -> dict:
        A, b, L = self.conditional_factors(draws, given)
        xg = np.array([state[g] for g in given])
        x = b + (A @ xg if len(given) else 0.0) + L @ rng.standard_normal(len(draws))
        return dict(zip(draws, x.tolist()))

    def record(self, state) -> np.ndarray:
        return np.array([state[n] for n in self.names])


def toy_conditionals(family: GaussianFamilyToy, block: Sequence[str], values: dict):
    """Mean vector and covariance of ``block`` given ``values``
    (coordinates not in either are integrated out)."""
    given = [g for g in family.names if g in values]
    if set(block) & set(given):
        raise ValueError("block and conditioning set overlap")
    A, b, L = family.conditional_factors(tuple(block), tuple(given))
    xg = np.array([values[g] for g in given])
    mean = b + (A @ xg if given else 0.0)
    return mean, L @ L.T
