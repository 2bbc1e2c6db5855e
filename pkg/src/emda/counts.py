"""Containers for the latent count hierarchy of the spectral model.

Levels, from most to least augmented:

* ``yddot_c``, ``yddot_l`` -- binned ideal counts per source (before absorption)
* ``ydot_c``, ``ydot_l``   -- the same after absorption / effective area
* ``ydot_plus``            -- both sources mixed, per ideal bin
* ``y_plus``               -- after blurring, per detector bin (background removed)

``scale_c`` and ``scale_l`` record the Poisson-rate multiplier of the level-2
counts.  Under the standard augmentation they are all ones; under a reduced
absorption augmentation the level-2 counts are ``Poisson(scale * lambda)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _ones_like(x):
    return np.ones_like(np.asarray(x, dtype=float))


@dataclass(eq=False)
class AugExpectations:
    """Conditional expectations of every latent level (the E-step output)."""

    y_plus: np.ndarray
    ydot_plus: np.ndarray
    ydot_c: np.ndarray
    ydot_l: np.ndarray
    yddot_c: np.ndarray
    yddot_l: np.ndarray
    scale_c: np.ndarray = field(default=None)
    scale_l: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.scale_c is None:
            self.scale_c = _ones_like(self.ydot_c)
        if self.scale_l is None:
            self.scale_l = _ones_like(self.ydot_l)

    def check(self, atol: float = 1e-9) -> None:
        """Raise ``ValueError`` if the ordering invariants are violated."""
        arrays = (self.y_plus, self.ydot_plus, self.ydot_c, self.ydot_l,
                  self.yddot_c, self.yddot_l)
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite expectation")
            if np.any(a < -atol):
                raise ValueError("negative expectation")
        scale = max(1.0, float(np.max(np.abs(self.ydot_plus), initial=0.0)))
        if not np.allclose(self.ydot_plus, self.ydot_c + self.ydot_l,
                           atol=atol * scale, rtol=1e-12):
            raise ValueError("ydot_plus != ydot_c + ydot_l")
        if np.any(self.yddot_c < self.ydot_c - atol * scale) or \
                np.any(self.yddot_l < self.ydot_l - atol * scale):
            raise ValueError("absorbed-count restoration decreased counts")

    def as_float(self) -> "AugExpectations":
        return self


@dataclass(eq=False)
class AugmentedCounts:
    """One joint draw of the latent counts (integers)."""

    y_plus: np.ndarray
    ydot_plus: np.ndarray
    ydot_c: np.ndarray
    ydot_l: np.ndarray
    yddot_c: np.ndarray
    yddot_l: np.ndarray
    scale_c: np.ndarray = field(default=None)
    scale_l: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.scale_c is None:
            self.scale_c = _ones_like(self.ydot_c)
        if self.scale_l is None:
            self.scale_l = _ones_like(self.ydot_l)

    def check(self, y_obs=None) -> None:
        ints = (self.y_plus, self.ydot_plus, self.ydot_c, self.ydot_l,
                self.yddot_c, self.yddot_l)
        for a in ints:
            if np.any(a < 0):
                raise ValueError("negative count")
        if y_obs is not None and np.any(self.y_plus > np.asarray(y_obs)):
            raise ValueError("y_plus exceeds observed counts")
        if np.any(self.ydot_plus != self.ydot_c + self.ydot_l):
            raise ValueError("ydot_plus != ydot_c + ydot_l")
        if np.any(self.yddot_c < self.ydot_c) or np.any(self.yddot_l < self.ydot_l):
            raise ValueError("yddot < ydot")

    def as_float(self) -> AugExpectations:
        """View a draw as a (degenerate) expectation, for Monte Carlo E-steps."""
        f = lambda a: np.asarray(a, dtype=float)  # noqa: E731
        return AugExpectations(f(self.y_plus), f(self.ydot_plus), f(self.ydot_c),
                               f(self.ydot_l), f(self.yddot_c), f(self.yddot_l),
                               self.scale_c, self.scale_l)


def average(stats) -> AugExpectations:
    """Elementwise mean of several draws or expectations."""
    stats = [s.as_float() for s in stats]
    if not stats:
        raise ValueError("nothing to average")
    mean = lambda name: np.mean([getattr(s, name) for s in stats], axis=0)  # noqa: E731
    return AugExpectations(mean("y_plus"), mean("ydot_plus"), mean("ydot_c"),
                           mean("ydot_l"), mean("yddot_c"), mean("yddot_l"),
                           stats[0].scale_c, stats[0].scale_l)
