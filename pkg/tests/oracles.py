"""Independent reference computations used by the tests.

Nothing here calls the package's own E-step or update code; each oracle
works from first principles (dense algebra, explicit Poisson pmfs, general
purpose optimisers).
"""
from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import optimize, stats
from scipy.special import gammaln


# --------------------------------------------------------------------------
# Forward model
# --------------------------------------------------------------------------

def gaussian_bin_mass(mu, sigma, lo, hi, points=20001):
    """Gaussian mass in ``[lo, hi]`` by Simpson integration of the density."""
    x = np.linspace(lo, hi, points)
    dens = np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))
    from scipy.integrate import simpson
    return float(simpson(dens, x=x))


def dense_expected(lam, d, g, M, bkg):
    """``xi_i = sum_j M_ij lam_j d_j g_j + b_i`` by explicit loops."""
    I, J = M.shape
    out = np.zeros(I)
    for i in range(I):
        s = 0.0
        for j in range(J):
            s += M[i, j] * lam[j] * d[j] * g[j]
        out[i] = s + bkg[i]
    return out


def poisson_loglik_oracle(y, mean):
    """Sum of scipy Poisson log-pmfs with the ``log y!`` term added back."""
    y = np.asarray(y)
    return float(np.sum(stats.poisson.logpmf(y, mean) + gammaln(y + 1)))


# --------------------------------------------------------------------------
# Enumeration of the latent-count posterior
# --------------------------------------------------------------------------

def compositions(total, parts):
    """All nonnegative integer vectors of length ``parts`` summing to ``total``."""
    if parts == 1:
        return np.array([[total]])
    out = []
    for bars in itertools.combinations(range(total + parts - 1), parts - 1):
        prev, row = -1, []
        for b in bars:
            row.append(b - prev - 1)
            prev = b
        row.append(total + parts - 1 - prev - 1)
        out.append(row)
    return np.array(out, dtype=int)


def enumerate_expectations(lam_c, lam_l, keep, M, bkg, y_obs):
    """Posterior means of every latent level by brute-force enumeration.

    Given ``theta`` the detected photons of different detector bins are
    independent, so the joint posterior is the product over detector bins
    of the posterior of that bin's split into ``(ideal bin, source)`` cells
    plus background.  For each detector bin every split is enumerated and
    weighted by the product of independent Poisson pmfs.  Photons that never
    reach the detector (blurred off it or absorbed) are unconstrained by the
    data, so their posterior equals their Poisson prior.
    """
    J = lam_c.size
    I = M.shape[0]
    rates_c = lam_c * keep
    rates_l = lam_l * keep
    ydot_c = np.zeros(J)
    ydot_l = np.zeros(J)
    y_plus = np.zeros(I)
    for i in range(I):
        cell_rates = np.concatenate([M[i] * rates_c, M[i] * rates_l, [bkg[i]]])
        if y_obs[i] == 0:
            continue
        comp = compositions(int(y_obs[i]), cell_rates.size)
        with np.errstate(divide="ignore"):
            logw = np.sum(stats.poisson.logpmf(comp, cell_rates[None, :]), axis=1)
        w = np.exp(logw - logw.max())
        w /= w.sum()
        mean = w @ comp
        ydot_c += mean[:J]
        ydot_l += mean[J:2 * J]
        y_plus[i] = mean[:2 * J].sum()
    lost = 1.0 - M.sum(axis=0)
    ydot_c += rates_c * lost
    ydot_l += rates_l * lost
    yddot_c = ydot_c + lam_c * (1 - keep)
    yddot_l = ydot_l + lam_l * (1 - keep)
    return dict(y_plus=y_plus, ydot_plus=ydot_c + ydot_l, ydot_c=ydot_c, ydot_l=ydot_l,
                yddot_c=yddot_c, yddot_l=yddot_l)


# --------------------------------------------------------------------------
# Numeric maximisers
# --------------------------------------------------------------------------

def argmax_1d(f, lo, hi, xtol=1e-12):
    """Bounded scalar maximiser (Brent), polished by golden section."""
    res = optimize.minimize_scalar(lambda x: -f(x), bounds=(lo, hi), method="bounded",
                                   options={"xatol": xtol, "maxiter": 10000})
    x = res.x
    width = max(1e-6, 1e-3 * (hi - lo))
    a, b = max(lo, x - width), min(hi, x + width)
    res2 = optimize.minimize_scalar(lambda x: -f(x), bracket=None, bounds=(a, b),
                                    method="bounded", options={"xatol": xtol})
    return float(res2.x if -res2.fun >= -res.fun else res.x)


def golden_max(f, lo, hi, tol=1e-12, iters=400):
    """Plain golden-section search for the maximiser of a unimodal ``f``."""
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if b - a < tol:
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def argmax_nd(f, x0, scale=None):
    """Nelder-Mead then BFGS polish on ``-f``."""
    x0 = np.asarray(x0, dtype=float)
    neg = lambda x: -f(x)  # noqa: E731
    r = optimize.minimize(neg, x0, method="Nelder-Mead",
                          options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 40000,
                                   "maxfev": 80000})
    r2 = optimize.minimize(neg, r.x, method="BFGS", options={"gtol": 1e-10})
    return r2.x if r2.fun <= r.fun else r.x


def free_term(theta_j, E, cd, wl, left, wr, right):
    """Bin ``j`` terms of the smoothed free-continuum objective:
    ``E log(cd theta) - cd theta - wl/2 (theta - left)^2 - wr/2 (right - theta)^2``."""
    if theta_j <= 0:
        return -np.inf if E > 0 else -0.5 * wl * left ** 2 - 0.5 * wr * right ** 2
    return (E * math.log(cd * theta_j) - cd * theta_j
            - 0.5 * wl * (theta_j - left) ** 2 - 0.5 * wr * (right - theta_j) ** 2)


# --------------------------------------------------------------------------
# Chain moment checks
# --------------------------------------------------------------------------

def _ar_se(x):
    """Monte Carlo standard error of a mean from batch means (independent of
    the package's ESS estimator)."""
    x = np.asarray(x, dtype=float)
    b = max(1, int(math.sqrt(x.size)))
    k = x.size // b
    means = x[:k * b].reshape(k, b).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(k))


def moment_z_scores(draws, mean, cov):
    """Z-scores of sample means, variances and covariances against the
    analytic values, each standardised by a batch-means standard error."""
    x = np.asarray(draws, dtype=float)
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    z = []
    for i in range(x.shape[1]):
        z.append((x[:, i].mean() - mean[i]) / _ar_se(x[:, i]))
        for j in range(i, x.shape[1]):
            prod = (x[:, i] - mean[i]) * (x[:, j] - mean[j])
            z.append((prod.mean() - cov[i, j]) / _ar_se(prod))
    return np.array(z)
