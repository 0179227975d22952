"""Discrete price marginals: construction, validation, order checks.

A marginal is a finitely supported probability measure on price levels. The
solver needs the prescribed marginals to be in convex order (otherwise no
martingale can match them) and, for clean duality, each adjacent prescribed
pair to be irreducible: strictly positive room between the call curves away
from the endpoints. Both checks work on call/absolute-deviation curves,
which are piecewise linear for discrete measures, so testing them on the
union of the supports is exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import MarginalError

MEAN_TOL_DEFAULT = 1e-10
CALL_TOL_DEFAULT = 1e-12


@dataclass(frozen=True)
class DiscreteMarginal:
    """Probability measure with finite support on the real line."""

    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.support, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if s.ndim != 1 or s.shape != w.shape or s.size == 0:
            raise MarginalError("support and weights must be matching nonempty vectors")
        if s.size > 1 and not np.all(np.diff(s) > 0):
            raise MarginalError("support must be strictly increasing")
        if np.any(w < 0):
            raise MarginalError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise MarginalError(f"weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "weights", w)

    def mean(self) -> float:
        return float(self.support @ self.weights)

    def second_moment(self) -> float:
        return float((self.support ** 2) @ self.weights)

    def expectation(self, f) -> float:
        """Expected value of a vectorized function of the price."""
        return float(np.asarray(f(self.support), dtype=float) @ self.weights)

    def call_curve(self, strikes) -> np.ndarray:
        """E[(S - k)^+] for each strike k."""
        k = np.atleast_1d(np.asarray(strikes, dtype=float))
        payoff = np.maximum(self.support[None, :] - k[:, None], 0.0)
        return payoff @ self.weights

    def abs_deviation(self, z) -> np.ndarray:
        """E[|S - z|] for each center z."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        return np.abs(self.support[None, :] - z[:, None]) @ self.weights


def make_marginal(kind: str, params: dict) -> DiscreteMarginal:
    """Build one of the standard marginal families.

    - "uniform_lattice": mass 1/n on n evenly spaced atoms over params
      ``interval``; a 1-atom lattice sits at the interval midpoint.
    - "dirac": unit mass at params ``at``.
    - "mixture": weighted atoms from params ``atoms`` and ``weights``
      (weights normalized, duplicate atoms merged).
    - "discretized_gaussian": lattice as uniform_lattice, weights
      proportional to a normal density with params ``center`` and ``std``.
    """
    if kind == "dirac":
        return DiscreteMarginal(np.array([float(params["at"])]), np.array([1.0]))
    if kind == "uniform_lattice":
        atoms = _lattice(params)
        return DiscreteMarginal(atoms, np.full(atoms.size, 1.0 / atoms.size))
    if kind == "discretized_gaussian":
        atoms = _lattice(params)
        c, sd = float(params["center"]), float(params["std"])
        if sd <= 0:
            raise MarginalError("discretized_gaussian needs std > 0")
        w = np.exp(-0.5 * ((atoms - c) / sd) ** 2)
        return DiscreteMarginal(atoms, w / w.sum())
    if kind == "mixture":
        atoms = np.asarray(params["atoms"], dtype=float)
        w = np.asarray(params["weights"], dtype=float)
        if atoms.shape != w.shape or atoms.ndim != 1 or atoms.size == 0:
            raise MarginalError("mixture needs matching atoms and weights vectors")
        if np.any(w < 0):
            raise MarginalError("mixture weights must be nonnegative")
        total = w.sum()
        if total <= 0:
            raise MarginalError("mixture weights must have positive total mass")
        uniq, inverse = np.unique(atoms, return_inverse=True)
        merged = np.zeros(uniq.size)
        np.add.at(merged, inverse, w)
        return DiscreteMarginal(uniq, merged / total)
    raise MarginalError(f"unknown marginal kind {kind!r}")


def _lattice(params: dict) -> np.ndarray:
    a, b = (float(v) for v in params["interval"])
    n = int(params["n"])
    if n < 1 or b < a:
        raise MarginalError(f"bad lattice spec: interval={params['interval']}, n={n}")
    if n == 1:
        return np.array([(a + b) / 2.0])
    return np.linspace(a, b, n)


def grid_weights(marginal: DiscreteMarginal, grid: np.ndarray, tol: Optional[float] = None) -> np.ndarray:
    """Weight vector of the marginal on a price grid containing its support.

    Atoms must sit on grid points (up to tol); anything else is rejected,
    since quietly projecting mass onto the nearest grid point would solve a
    different problem than the one stated.
    """
    g = np.asarray(grid, dtype=float)
    if tol is None:
        span = float(g.max() - g.min()) if g.size > 1 else 1.0
        tol = 1e-12 * max(1.0, span)
    pos = np.searchsorted(g, marginal.support)
    left = np.clip(pos - 1, 0, g.size - 1)
    right = np.clip(pos, 0, g.size - 1)
    idx = np.where(
        np.abs(marginal.support - g[left]) <= np.abs(g[right] - marginal.support),
        left,
        right,
    )
    err = np.abs(marginal.support - g[idx])
    if err.max() > tol:
        bad = float(marginal.support[int(np.argmax(err))])
        raise MarginalError(
            f"marginal atom {bad!r} is not on the price grid "
            f"(nearest point {err.max():.3e} away, tolerance {tol:.3e})"
        )
    m = np.zeros(g.size)
    m[idx] = marginal.weights
    return m


@dataclass(frozen=True)
class ConvexOrderReport:
    ordered: bool
    worst_strike: Optional[float]
    gap: float


@dataclass(frozen=True)
class IrreducibilityReport:
    irreducible: bool
    witness_z: Optional[float]


def check_convex_order(
    a: DiscreteMarginal,
    b: DiscreteMarginal,
    mean_tol: float = MEAN_TOL_DEFAULT,
    call_tol: float = CALL_TOL_DEFAULT,
) -> ConvexOrderReport:
    """Is b a spread of a, i.e. equal means and dominating call curve?

    The call curves of discrete measures are piecewise linear with kinks on
    the supports, so dominance over the union of supports is dominance
    everywhere. gap is the worst signed margin (negative = violation); on a
    mean mismatch, where call dominance is not even well posed, gap reports
    the mean difference and worst_strike is None.
    """
    mean_gap = b.mean() - a.mean()
    if abs(mean_gap) > mean_tol:
        return ConvexOrderReport(False, None, float(mean_gap))
    strikes = np.union1d(a.support, b.support)
    diff = b.call_curve(strikes) - a.call_curve(strikes)
    worst = int(np.argmin(diff))
    return ConvexOrderReport(
        bool(diff[worst] >= -call_tol), float(strikes[worst]), float(diff[worst])
    )


def check_irreducible(
    a: DiscreteMarginal, b: DiscreteMarginal, tol: float = 0.0
) -> IrreducibilityReport:
    """Does b spread out strictly more than a everywhere between its endpoints?

    Tests E_b[|S - z|] - E_a[|S - z|] > tol for every z in the support of a
    and every interior support point of b. Both curves are piecewise linear
    with kinks only at support points, and they agree in slope outside the
    convex hull of b, so strict positivity on this finite set is strict
    positivity on the whole open interval. Ties count as failures: a touching
    point splits the transport problem into independent halves.
    """
    centers = list(a.support) + list(b.support[1:-1])
    zs = np.unique(np.asarray(centers, dtype=float))
    gaps = b.abs_deviation(zs) - a.abs_deviation(zs)
    bad = np.flatnonzero(gaps <= tol)
    if bad.size:
        return IrreducibilityReport(False, float(zs[bad[0]]))
    return IrreducibilityReport(True, None)
