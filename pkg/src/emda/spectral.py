"""Poisson spectral model: forward intensity, likelihood, simulation and
parameter updates given expected latent counts.

The ideal intensity in energy bin ``j`` is::

    lambda_j = delta_j * f(continuum, E_j) + nu * p_j(mu, sigma^2)

and detector bin ``i`` observes ``Poisson(xi_i)`` with::

    xi_i = sum_j M_ij * lambda_j * d_j * g(absorption, E_j) + background_i

Absorption is ``g = exp(-xi_abs / E)`` with ``xi_abs >= 0`` so that ``g`` is a
survival probability.  Gaussian line mass falling outside the grid is dropped
(``p`` is not renormalised), so ``nu`` is the total line intensity and
``nu * sum(p)`` the part landing on the grid.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Union

import numpy as np
from scipy import sparse
from scipy.special import log_ndtr, ndtr, xlogy

from .counts import AugmentedCounts


class SpectralError(ValueError):
    """Invalid model input (dimension mismatch or broken invariant)."""


class DomainError(SpectralError):
    """A likelihood or update was evaluated outside its domain."""


class NumericalWarning(RuntimeWarning):
    pass


# --------------------------------------------------------------------------
# Domain types
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EnergyGrid:
    """Ideal energy bins (``J`` of them) and the detector bin count ``I``."""

    edges: np.ndarray
    detector_bins: int
    mean_energies: Optional[np.ndarray] = None

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        if edges.ndim != 1 or edges.size < 2:
            raise SpectralError("need at least two bin edges")
        if not np.all(np.diff(edges) > 0):
            raise SpectralError("bin edges must be strictly increasing")
        if edges[0] <= 0:
            raise SpectralError("energies must be positive")
        object.__setattr__(self, "edges", edges)
        if self.mean_energies is None:
            mean = 0.5 * (edges[:-1] + edges[1:])
        else:
            mean = np.asarray(self.mean_energies, dtype=float)
            if mean.shape != (edges.size - 1,):
                raise SpectralError("mean_energies must have one entry per bin")
            if np.any(mean < edges[:-1]) or np.any(mean > edges[1:]):
                raise SpectralError("mean energy outside its bin")
        object.__setattr__(self, "mean_energies", mean)
        if int(self.detector_bins) < 1:
            raise SpectralError("detector_bins must be >= 1")
        object.__setattr__(self, "detector_bins", int(self.detector_bins))

    @property
    def ideal_bins(self) -> int:
        return self.edges.size - 1

    @cached_property
    def widths(self) -> np.ndarray:
        w = np.diff(self.edges)
        w.flags.writeable = False
        return w

    @cached_property
    def log_mean_energies(self) -> np.ndarray:
        return np.log(self.mean_energies)

    @cached_property
    def sigma2_min(self) -> float:
        """Floor on the Gaussian line variance."""
        return float((self.widths.min() / 10.0) ** 2)

    @classmethod
    def uniform(cls, lo: float, hi: float, ideal_bins: int,
                detector_bins: Optional[int] = None) -> "EnergyGrid":
        return cls(np.linspace(lo, hi, ideal_bins + 1),
                   ideal_bins if detector_bins is None else detector_bins)


class ResponseMatrix:
    """Sparse ``I x J`` redistribution matrix with column sums in (0, 1]."""

    def __init__(self, entries, shape=None):
        if sparse.issparse(entries):
            mat = sparse.csr_matrix(entries, dtype=float)
        else:
            mat = sparse.csr_matrix(np.asarray(entries, dtype=float))
        if shape is not None and mat.shape != tuple(shape):
            raise SpectralError(f"response shape {mat.shape} != {tuple(shape)}")
        if mat.nnz and (mat.data.min() < 0 or mat.data.max() > 1):
            raise SpectralError("response entries must lie in [0, 1]")
        colsum = np.asarray(mat.sum(axis=0)).ravel()
        if np.any(colsum <= 0) or np.any(colsum > 1 + 1e-12):
            raise SpectralError("each response column sum must lie in (0, 1]")
        self.entries = mat
        self.column_sums = np.minimum(colsum, 1.0)
        self.lost = 1.0 - self.column_sums
        # Dense copy for small problems: faster products and multinomial draws.
        self._dense = mat.toarray() if mat.shape[0] * mat.shape[1] <= 4_000_000 else None

    @property
    def shape(self):
        return self.entries.shape

    @property
    def dense(self) -> np.ndarray:
        if self._dense is None:
            return self.entries.toarray()
        return self._dense

    def matvec(self, x: np.ndarray) -> np.ndarray:
        if self._dense is not None:
            return self._dense @ x
        return self.entries @ x

    def rmatvec(self, y: np.ndarray) -> np.ndarray:
        if self._dense is not None:
            return y @ self._dense
        return self.entries.T @ y

    @classmethod
    def identity(cls, n: int) -> "ResponseMatrix":
        return cls(sparse.identity(n, format="csr"))

    @classmethod
    def gaussian_blur(cls, grid: EnergyGrid, fwhm: float, efficiency=1.0,
                      detector_edges=None) -> "ResponseMatrix":
        """Gaussian redistribution of each ideal bin's mean energy onto
        detector channels; mass beyond the detector range is lost."""
        if detector_edges is None:
            if grid.detector_bins != grid.ideal_bins:
                raise SpectralError("detector_edges required when I != J")
            detector_edges = grid.edges
        de = np.asarray(detector_edges, dtype=float)
        if de.size - 1 != grid.detector_bins:
            raise SpectralError("detector_edges do not match detector_bins")
        sd = fwhm / (2.0 * math.sqrt(2.0 * math.log(2.0)))
        z = (de[:, None] - grid.mean_energies[None, :]) / sd
        mat = np.diff(ndtr(z), axis=0) * np.broadcast_to(efficiency, (grid.ideal_bins,))
        mat[mat < 1e-12] = 0.0
        return cls(sparse.csr_matrix(mat))


@dataclass(frozen=True)
class PowerLaw:
    gamma: float
    beta: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise SpectralError("power-law amplitude must be positive")


@dataclass(frozen=True, eq=False)
class FreeContinuum:
    """Saturated continuum with a Gaussian random-walk smoothing prior.

    ``omega[k]`` couples bins ``k`` and ``k + 1`` (0-based); its length is
    ``J - 1``.
    """

    theta: np.ndarray
    omega: np.ndarray = None

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        omega = np.zeros(theta.size - 1) if self.omega is None else \
            np.broadcast_to(np.asarray(self.omega, dtype=float), (theta.size - 1,)).copy()
        if np.any(theta < 0):
            raise SpectralError("free continuum intensities must be >= 0")
        if np.any(omega < 0):
            raise SpectralError("smoothing weights must be >= 0")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "omega", omega)


Continuum = Union[PowerLaw, FreeContinuum]


@dataclass(frozen=True)
class GaussianLine:
    nu: float
    mu: float
    sigma2: float

    def __post_init__(self):
        if self.nu < 0:
            raise SpectralError("line intensity must be >= 0")
        if not self.sigma2 > 0:
            raise SpectralError("line variance must be positive")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)


@dataclass(frozen=True)
class DeltaLine:
    nu: float
    bin: int

    def __post_init__(self):
        if self.nu < 0:
            raise SpectralError("line intensity must be >= 0")


Line = Union[GaussianLine, DeltaLine, None]


@dataclass(frozen=True, eq=False)
class Absorption:
    """Effective area ``d_j`` and optional exponential absorption ``xi``.

    ``xi=None`` means no absorption (``g = 1``).
    """

    effective_area: Optional[np.ndarray] = None
    xi: Optional[float] = None

    def __post_init__(self):
        if self.effective_area is not None:
            d = np.asarray(self.effective_area, dtype=float)
            if np.any(d < 0) or np.any(d > 1):
                raise SpectralError("effective area must lie in [0, 1]")
            object.__setattr__(self, "effective_area", d)
        if self.xi is not None and self.xi < 0:
            raise SpectralError("absorption scale must be >= 0")


@dataclass(frozen=True, eq=False)
class SpectralParams:
    continuum: Continuum
    line: Line = None
    absorption: Absorption = field(default_factory=Absorption)
    background: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.background is not None:
            b = np.asarray(self.background, dtype=float)
            if np.any(b < 0):
                raise SpectralError("background must be >= 0")
            object.__setattr__(self, "background", b)
        if self.absorption is None:
            object.__setattr__(self, "absorption", Absorption())

    def replace(self, **changes) -> "SpectralParams":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class ObservedSpectrum:
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 1:
            raise SpectralError("counts must be a vector")
        if not np.all(np.equal(np.mod(c, 1), 0)) or np.any(c < 0):
            raise SpectralError("counts must be nonnegative integers")
        object.__setattr__(self, "counts", c.astype(np.int64))


# --------------------------------------------------------------------------
# Forward model
# --------------------------------------------------------------------------

def _ndtr_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``Phi(b) - Phi(a)`` for ``a <= b`` without upper-tail cancellation."""
    upper = a > 0
    return np.where(upper, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))


def _log_ndtr_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``log(Phi(b) - Phi(a))`` stable in both tails."""
    upper = a > 0
    hi = np.where(upper, log_ndtr(-a), log_ndtr(b))
    lo = np.where(upper, log_ndtr(-b), log_ndtr(a))
    with np.errstate(divide="ignore", invalid="ignore"):
        return hi + np.log1p(-np.exp(lo - hi))


def _check_grid_len(vec, grid: EnergyGrid, what: str) -> None:
    if np.shape(vec) != (grid.ideal_bins,):
        raise SpectralError(f"{what} has length {np.size(vec)}, grid has {grid.ideal_bins} bins")


# Last Gaussian bin probabilities per grid (read-only arrays).
_PROB_CACHE: dict = {}


def line_bin_probs(line: Line, grid: EnergyGrid) -> np.ndarray:
    """Fraction of the line's photons expected in each ideal bin."""
    J = grid.ideal_bins
    if line is None:
        return np.zeros(J)
    if isinstance(line, DeltaLine):
        if not 0 <= line.bin < J:
            raise SpectralError("delta line bin outside the grid")
        p = np.zeros(J)
        p[line.bin] = 1.0
        return p
    if not line.sigma2 > 0:
        raise SpectralError("line variance must be positive")
    hit = _PROB_CACHE.get(id(grid))
    if hit is not None and hit[0] is grid and hit[1] == line.mu and hit[2] == line.sigma2:
        return hit[3]
    z = (grid.edges - line.mu) / line.sigma
    p = _ndtr_diff(z[:-1], z[1:])
    p.flags.writeable = False
    _PROB_CACHE[id(grid)] = (grid, line.mu, line.sigma2, p)
    if len(_PROB_CACHE) > 64:
        _PROB_CACHE.pop(next(iter(_PROB_CACHE)))
    return p


def continuum_intensity(continuum: Continuum, grid: EnergyGrid) -> np.ndarray:
    """``delta_j * f(continuum, E_j)``."""
    if isinstance(continuum, PowerLaw):
        return grid.widths * continuum.gamma * grid.mean_energies ** (-continuum.beta)
    _check_grid_len(continuum.theta, grid, "free continuum")
    return grid.widths * continuum.theta


def line_intensity(line: Line, grid: EnergyGrid) -> np.ndarray:
    if line is None:
        return np.zeros(grid.ideal_bins)
    return line.nu * line_bin_probs(line, grid)


def bin_intensity(params: SpectralParams, grid: EnergyGrid) -> np.ndarray:
    """Ideal intensity per energy bin (continuum plus line)."""
    return continuum_intensity(params.continuum, grid) + line_intensity(params.line, grid)


def transmission(absorption: Absorption, grid: EnergyGrid) -> np.ndarray:
    """``d_j * g(absorption, E_j)``: probability a photon survives to the detector."""
    hit = _TRANS_CACHE.get(id(grid))
    if hit is not None and hit[0] is grid and hit[1] is absorption:
        return hit[2]
    t = _transmission(absorption, grid)
    t.flags.writeable = False
    _TRANS_CACHE[id(grid)] = (grid, absorption, t)
    if len(_TRANS_CACHE) > 64:
        _TRANS_CACHE.pop(next(iter(_TRANS_CACHE)))
    return t


_TRANS_CACHE: dict = {}


def _transmission(absorption: Absorption, grid: EnergyGrid) -> np.ndarray:
    t = np.ones(grid.ideal_bins)
    if absorption.effective_area is not None:
        _check_grid_len(absorption.effective_area, grid, "effective area")
        t = t * absorption.effective_area
    if absorption.xi is not None:
        t = t * np.exp(-absorption.xi / grid.mean_energies)
    return t


def background_of(params: SpectralParams, grid: EnergyGrid) -> np.ndarray:
    if params.background is None:
        return np.zeros(grid.detector_bins)
    b = np.broadcast_to(params.background, (grid.detector_bins,))
    if np.shape(params.background) not in ((), (grid.detector_bins,), (1,)):
        raise SpectralError("background length does not match detector bins")
    return np.asarray(b, dtype=float)


def _check_rsp(grid: EnergyGrid, rsp: ResponseMatrix) -> None:
    if rsp.shape != (grid.detector_bins, grid.ideal_bins):
        raise SpectralError(f"response shape {rsp.shape} does not match grid "
                            f"({grid.detector_bins}, {grid.ideal_bins})")


def expected_counts(params: SpectralParams, grid: EnergyGrid, rsp: ResponseMatrix) -> np.ndarray:
    """Poisson mean of every detector bin."""
    _check_rsp(grid, rsp)
    lam = bin_intensity(params, grid) * transmission(params.absorption, grid)
    return rsp.matvec(lam) + background_of(params, grid)


def log_prior(params: SpectralParams) -> float:
    """Log prior density up to a constant (flat except for the smoothing prior)."""
    c = params.continuum
    if isinstance(c, FreeContinuum) and np.any(c.omega > 0):
        return float(-0.5 * np.sum(c.omega * np.diff(c.theta) ** 2))
    return 0.0


def poisson_loglik(counts: np.ndarray, mean: np.ndarray) -> float:
    """``sum(y log m - m)``; raises ``DomainError`` when ``m = 0 < y``."""
    counts = np.asarray(counts)
    if np.any((mean <= 0) & (counts > 0)) or np.any(mean < 0):
        raise DomainError("zero Poisson mean with positive count")
    return float(np.sum(xlogy(counts, mean) - mean))


def observed_loglik(params: SpectralParams, grid: EnergyGrid, rsp: ResponseMatrix,
                    data: ObservedSpectrum) -> float:
    """Observed-data log posterior, dropping ``-sum(log y!)``."""
    xi = expected_counts(params, grid, rsp)
    if data.counts.shape != xi.shape:
        raise SpectralError("spectrum length does not match detector bins")
    return poisson_loglik(data.counts, xi) + log_prior(params)


def simulate_spectrum(params: SpectralParams, grid: EnergyGrid, rsp: ResponseMatrix,
                      seed) -> tuple[ObservedSpectrum, AugmentedCounts]:
    """Draw the whole generative chain (levels 2 to 6) from one seed."""
    _check_rsp(grid, rsp)
    rngs = [np.random.Generator(np.random.Philox(s))
            for s in np.random.SeedSequence(seed).spawn(5)]
    lam_c = continuum_intensity(params.continuum, grid)
    lam_l = line_intensity(params.line, grid)
    keep = transmission(params.absorption, grid)

    yddot_c = rngs[0].poisson(lam_c)
    yddot_l = rngs[0].poisson(lam_l)
    ydot_c = rngs[1].binomial(yddot_c, keep)
    ydot_l = rngs[1].binomial(yddot_l, keep)
    ydot_plus = ydot_c + ydot_l
    # Each ideal bin scatters its photons over detector bins plus a "lost" cell.
    cells = np.vstack([rsp.dense, rsp.lost[None, :]]).T
    cells = cells / cells.sum(axis=1, keepdims=True)
    y_plus = rngs[2].multinomial(ydot_plus, cells)[:, :-1].sum(axis=0)
    y_obs = y_plus + rngs[3].poisson(background_of(params, grid))
    latent = AugmentedCounts(y_plus, ydot_plus, ydot_c, ydot_l, yddot_c, yddot_l)
    return ObservedSpectrum(y_obs), latent


# --------------------------------------------------------------------------
# Parameter updates given expected latent counts
# --------------------------------------------------------------------------

def _scale(expected, name, J):
    s = getattr(expected, name, None)
    return np.ones(J) if s is None else np.asarray(s, dtype=float)


def m_step_line(expected, grid: EnergyGrid, current: Line = None) -> Line:
    """Moment update of the line from expected level-2 line counts.

    Photon energies are placed at bin means.  ``sigma^2`` is floored at
    ``grid.sigma2_min``.  When no line counts are expected the location and
    width of ``current`` are kept.
    """
    w = np.asarray(expected.yddot_l, dtype=float)
    nu = float(w.sum())
    if isinstance(current, DeltaLine):
        return DeltaLine(nu, current.bin)
    if nu <= 0:
        if current is None:
            raise SpectralError("no line counts and no current line")
        return GaussianLine(0.0, current.mu, current.sigma2)
    E = grid.mean_energies
    mu = float(np.dot(w, E) / nu)
    sigma2 = float(np.dot(w, (E - mu) ** 2) / nu)
    return GaussianLine(nu, mu, max(sigma2, grid.sigma2_min))


_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _line_logp(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bin probabilities and their logs for standardised edges ``z``."""
    a, b = z[:-1], z[1:]
    P = ndtr(z)
    Q = ndtr(-z)
    p = np.where(a > 0, Q[:-1] - Q[1:], P[1:] - P[:-1])
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    tiny = p < 1e-280
    if tiny.any():
        logp[tiny] = _log_ndtr_diff(a[tiny], b[tiny])
    return p, logp


def _line_profile(mu, s, edges, w, c, W, derivs=True):
    """Line objective with the intensity profiled out,
    ``sum_j w_j log p_j - W log sum_j c_j p_j``, with its gradient and
    Hessian in ``(mu, log sigma)`` when ``derivs`` is set.

    Derivatives of ``p_j`` are carried as ratios ``(dp_j / p_j)`` built in
    log space, so tail bins cannot overflow.  Returns
    ``(value, grad, hess, S)`` with ``S = sum_j c_j p_j``.
    """
    sigma = math.exp(s)
    z = (edges - mu) / sigma
    p, logp = _line_logp(z)
    S = float(np.dot(c, p))
    dead = np.isneginf(logp)
    if S <= 0 or np.any(dead & (w > 0)):
        return -np.inf, None, None, S
    if dead.any():
        logp = np.where(dead, 0.0, logp)
    val = float(np.dot(w, logp)) - (W * math.log(S) if W > 0 else 0.0)
    if not derivs:
        return val, None, None, S
    logphi = -0.5 * z * z - _LOG_SQRT_2PI
    a, b = z[:-1], z[1:]
    ea = np.exp(logphi[:-1] - logp)
    eb = np.exp(logphi[1:] - logp)
    d1 = eb - ea
    dz = b * eb - a * ea
    dz2 = b * dz + a * (b - a) * ea      # b^2 eb - a^2 ea
    dz3 = b * b * b * eb - a * a * a * ea
    R = np.empty((5, p.size))
    R[0] = -d1 / sigma                    # (dp/dmu) / p
    R[1] = -dz                            # (dp/dlog sigma) / p
    R[2] = R[1] / sigma ** 2              # second derivatives over p
    R[3] = -(dz2 - d1) / sigma
    R[4] = dz - dz3
    cp = c * p
    A = R @ np.stack([w, cp], axis=1)     # sums weighted by w and by c p
    outer_w = (R[:2] * w) @ R[:2].T
    g_w, g_c = A[:2, 0], A[:2, 1]
    grad = g_w - W * g_c / S
    h_w = np.array([[A[2, 0], A[3, 0]], [A[3, 0], A[4, 0]]]) - outer_w
    h_c = np.array([[A[2, 1], A[3, 1]], [A[3, 1], A[4, 1]]])
    hess = h_w - W * (h_c / S - np.outer(g_c, g_c) / S ** 2)
    return val, grad, hess, S


def _negdef(h: np.ndarray) -> np.ndarray:
    """Nearest-in-spirit negative definite matrix: eigenvalues replaced by
    minus their absolute values (floored)."""
    a, b, d = float(h[0, 0]), 0.5 * float(h[0, 1] + h[1, 0]), float(h[1, 1])
    if a < 0 and a * d - b * b > 0:
        return np.array([[a, b], [b, d]])
    vals, vecs = np.linalg.eigh(np.array([[a, b], [b, d]]))
    floor = 1e-10 * max(1.0, float(np.max(np.abs(vals))))
    vals = -np.maximum(np.abs(vals), floor)
    return (vecs * vals) @ vecs.T


def maximize_line(weights, grid: EnergyGrid, current: Line, scale=None,
                  fix_mu: bool = False, max_newton: int = 1) -> Line:
    """Exact line update for the binned model.

    Maximises ``sum_j w_j log(nu c_j p_j) - nu sum_j c_j p_j`` over
    ``(nu, mu, sigma^2)`` where ``w`` are expected level-2 line counts and
    ``c`` the level-2 rate multipliers (ones for the standard augmentation).
    Safeguarded Newton in ``(mu, log sigma)`` started from ``current``
    (``max_newton`` steps, intensity profiled exactly); the objective never
    decreases.  ``fix_mu`` holds the location fixed.
    """
    w = np.asarray(weights, dtype=float)
    J = grid.ideal_bins
    c = np.ones(J) if scale is None else np.asarray(scale, dtype=float)
    W = float(w.sum())
    if isinstance(current, DeltaLine):
        cj = c[current.bin]
        return DeltaLine(W / cj if W > 0 else 0.0, current.bin)
    if current is None:
        raise SpectralError("line update needs a current line")
    if W <= 0:
        return GaussianLine(0.0, current.mu, current.sigma2)
    edges = grid.edges
    s_min = 0.5 * math.log(grid.sigma2_min)
    mu, s = current.mu, max(0.5 * math.log(current.sigma2), s_min)
    val, grad, hess, S = _line_profile(mu, s, edges, w, c, W)
    if not np.isfinite(val):
        # Current location puts zero probability where counts are expected:
        # restart from the moment estimate.
        m = m_step_line(_Weights(w), grid, current)
        mu, s = m.mu, max(0.5 * math.log(m.sigma2), s_min)
        val, grad, hess, S = _line_profile(mu, s, edges, w, c, W)
        if not np.isfinite(val):
            raise DomainError("line update failed: zero probability for expected counts")
    for it in range(max_newton):
        if grad is None:
            val, grad, hess, S = _line_profile(mu, s, edges, w, c, W)
        if fix_mu:
            step = np.array([0.0, -grad[1] / min(hess[1, 1], -1e-12)])
            if hess[1, 1] >= 0:
                step[1] = float(np.sign(grad[1])) * 0.1
        else:
            step = -np.linalg.solve(_negdef(hess), grad)
        t = 1.0
        accepted = False
        for _ in range(60):
            mu_n, s_n = mu + t * step[0], max(s + t * step[1], s_min)
            val_n, _, _, S_n = _line_profile(mu_n, s_n, edges, w, c, W, derivs=False)
            if np.isfinite(val_n) and val_n >= val:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        moved = abs(mu_n - mu) + abs(s_n - s)
        mu, s, val, S = mu_n, s_n, val_n, S_n
        grad = hess = None
        if moved < 1e-13 * (1.0 + abs(mu)):
            break
    sigma2 = math.exp(2 * s)
    if sigma2 < grid.sigma2_min:
        sigma2 = grid.sigma2_min
        S = float(np.dot(c, line_bin_probs(GaussianLine(1.0, mu, sigma2), grid)))
    return GaussianLine(W / S, mu, sigma2)


@dataclass(frozen=True, eq=False)
class _Weights:
    yddot_l: np.ndarray


def _powerlaw_profile(beta, logE, base, w, W):
    """Power-law objective with the amplitude profiled out, and its first two
    derivatives in the index."""
    u = base * np.exp(-beta * logE)
    S = float(u.sum())
    m1 = float(np.dot(u, logE)) / S
    m2 = float(np.dot(u, logE * logE)) / S
    val = -beta * float(np.dot(w, logE)) - W * math.log(S)
    d1 = -float(np.dot(w, logE)) + W * m1
    d2 = -W * (m2 - m1 * m1)
    return val, d1, d2, S


def cm_step_powerlaw(expected, grid: EnergyGrid, current: PowerLaw,
                     max_newton: int = 1, fix_beta: bool = False) -> PowerLaw:
    """Power-law update from expected level-2 continuum counts.

    The amplitude has a closed form given the index; the index is found by
    safeguarded Newton on the (concave) profiled objective.
    """
    w = np.asarray(expected.yddot_c, dtype=float)
    c = _scale(expected, "scale_c", grid.ideal_bins)
    W = float(w.sum())
    if W <= 0:
        warnings.warn("no continuum counts; power law left unchanged", NumericalWarning)
        return current
    logE = grid.log_mean_energies
    base = c * grid.widths
    beta = current.beta
    val, d1, d2, S = _powerlaw_profile(beta, logE, base, w, W)
    if not fix_beta:
        if d2 >= -1e-12 * W * (1.0 + float(np.max(logE * logE))):
            warnings.warn("singular power-law curvature; index left unchanged",
                          NumericalWarning)
        else:
            for _ in range(max_newton):
                step = -d1 / d2
                t = 1.0
                for _ in range(60):
                    b_n = beta + t * step
                    v_n, d1_n, d2_n, S_n = _powerlaw_profile(b_n, logE, base, w, W)
                    if v_n >= val:
                        break
                    t *= 0.5
                else:
                    break
                moved = abs(b_n - beta)
                beta, val, d1, d2, S = b_n, v_n, d1_n, d2_n, S_n
                if moved < 1e-14 * (1.0 + abs(beta)) or d2 >= 0:
                    break
    return PowerLaw(W / S, beta)


def powerlaw_objective(expected, grid: EnergyGrid, cont: PowerLaw) -> float:
    """Expected complete-data log likelihood of the continuum (power law)."""
    w = np.asarray(expected.yddot_c, dtype=float)
    c = _scale(expected, "scale_c", grid.ideal_bins)
    mean = c * continuum_intensity(cont, grid)
    return float(np.sum(xlogy(w, mean) - mean))


def _free_root(E, A, cd, left_term, right_term):
    B = -(cd - left_term - right_term) / 2.0
    if A == 0:
        return E / cd
    return max(0.0, (B + math.sqrt(B * B + A * E)) / A)


def cm_step_free_continuum(expected, grid: EnergyGrid, current: FreeContinuum,
                           sweeps: int = 1, tol: float = 0.0) -> FreeContinuum:
    """Sequential closed-form conditional maximisation of each free-continuum bin.

    Bin ``j`` is updated with the already-updated left neighbour and the old
    right neighbour.  ``sweeps > 1`` repeats the cycle, stopping early when
    the largest relative change falls below ``tol``.
    """
    E = np.asarray(expected.yddot_c, dtype=float)
    if np.any(E < 0):
        raise DomainError("negative expected continuum counts")
    J = grid.ideal_bins
    cd = _scale(expected, "scale_c", J) * grid.widths
    omega = current.omega
    theta = current.theta.astype(float).copy()
    Ev, cdv, om = E.tolist(), cd.tolist(), omega.tolist()
    for _ in range(sweeps):
        biggest = 0.0
        for j in range(J):
            wl = om[j - 1] if j > 0 else 0.0
            wr = om[j] if j < J - 1 else 0.0
            left = wl * theta[j - 1] if j > 0 else 0.0
            right = wr * theta[j + 1] if j < J - 1 else 0.0
            new = _free_root(Ev[j], wl + wr, cdv[j], left, right)
            biggest = max(biggest, abs(new - theta[j]) / (1.0 + abs(new)))
            theta[j] = new
        if biggest <= tol:
            break
    return FreeContinuum(theta, omega)


def free_continuum_objective(expected, grid: EnergyGrid, cont: FreeContinuum) -> float:
    """Expected complete-data log posterior of the free continuum."""
    w = np.asarray(expected.yddot_c, dtype=float)
    c = _scale(expected, "scale_c", grid.ideal_bins)
    mean = c * continuum_intensity(cont, grid)
    if np.any((mean <= 0) & (w > 0)):
        return -np.inf
    return float(np.sum(xlogy(w, mean) - mean)) - 0.5 * float(np.sum(cont.omega * np.diff(cont.theta) ** 2))


def _absorption_pieces(expected, grid):
    J = grid.ideal_bins
    kept = []
    for src in ("c", "l"):
        ydot = np.asarray(getattr(expected, f"ydot_{src}"), dtype=float)
        yddot = np.asarray(getattr(expected, f"yddot_{src}"), dtype=float)
        scale = _scale(expected, f"scale_{src}", J)
        kept.append((ydot, np.maximum(yddot - ydot, 0.0), scale))
    return kept


def absorption_objective(expected, grid: EnergyGrid, xi: float, effective_area=None) -> float:
    """Expected binomial-thinning log likelihood as a function of ``xi``."""
    d = np.ones(grid.ideal_bins) if effective_area is None else np.asarray(effective_area)
    E = grid.mean_energies
    total = 0.0
    for T, U, c in _absorption_pieces(expected, grid):
        q = d * np.exp(-xi / E) / c
        if np.any(q > 1 + 1e-12):
            return -np.inf
        q = np.minimum(q, 1.0)
        with np.errstate(divide="ignore"):
            total += float(np.sum(xlogy(T, q) + xlogy(U, 1 - q)))
    return total


def _absorption_derivs(expected, grid, xi, d):
    E = grid.mean_energies
    g1 = g2 = 0.0
    for T, U, c in _absorption_pieces(expected, grid):
        q = d * np.exp(-xi / E) / c
        g1 -= float(np.sum(T / E))
        pos = U > 0
        r = q[pos] / (1 - q[pos])
        g1 += float(np.sum(U[pos] * r / E[pos]))
        g2 -= float(np.sum(U[pos] * r / (1 - q[pos]) / E[pos] ** 2))
    return g1, g2


def cm_step_absorption(expected, grid: EnergyGrid, current: Absorption,
                       max_newton: int = 1) -> Absorption:
    """Safeguarded Newton update of the exponential absorption scale."""
    if current.xi is None:
        return current
    J = grid.ideal_bins
    d = np.ones(J) if current.effective_area is None else current.effective_area
    E = grid.mean_energies
    # Feasibility: thinning probabilities d g / c may not exceed one.
    lo = 0.0
    for _, _, c in _absorption_pieces(expected, grid):
        with np.errstate(divide="ignore"):
            lo = max(lo, float(np.max(E * np.log(np.where(d > 0, d / c, 1.0)))))
    xi = max(current.xi, lo)
    val = absorption_objective(expected, grid, xi, d)
    for _ in range(max_newton):
        g1, g2 = _absorption_derivs(expected, grid, xi, d)
        if g2 < 0:
            step = -g1 / g2
        elif g1 < 0:
            step = lo - xi
        else:
            step = max(1.0, xi)
        t = 1.0
        for _ in range(60):
            xi_n = max(xi + t * step, lo)
            v_n = absorption_objective(expected, grid, xi_n, d)
            if v_n >= val:
                break
            t *= 0.5
        else:
            break
        moved = abs(xi_n - xi)
        xi, val = xi_n, v_n
        if moved < 1e-14 * (1.0 + xi):
            break
    return Absorption(current.effective_area, xi)
