"""Closed-form baselines the solver is judged against.

Three references live here: the law of the running maximum of the
Azema-Yor embedding (continuous-time envelope over all martingales with a
fixed terminal law), the digital-option value that law implies for a
symmetric two-point terminal marginal, and the values of the late and
early transports for time-averaged convex payoffs. All are exact for
discrete marginals, which is what makes them usable as test oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ProblemError
from .marginals import DiscreteMarginal, check_convex_order

SCAN_POINTS = 10_000
SCAN_TOL = 1e-9


@dataclass(frozen=True)
class MaxLawCurve:
    """Tail of the maximum's law on a barrier grid, plus its mean.

    ``tail_probs[i]`` is the probability that the running maximum reaches
    ``barriers[i]``; ``price`` is the expected maximum implied by the curve
    (so it depends on how finely the caller grids the barriers).
    """

    barriers: np.ndarray
    tail_probs: np.ndarray
    price: float

    def __post_init__(self):
        object.__setattr__(self, "barriers", np.asarray(self.barriers, dtype=float))
        object.__setattr__(self, "tail_probs", np.asarray(self.tail_probs, dtype=float))
        if self.barriers.ndim != 1 or self.barriers.size == 0:
            raise ProblemError("barriers must be a nonempty vector")
        if np.any(np.diff(self.barriers) <= 0):
            raise ProblemError("barriers must be strictly increasing")
        if np.any(self.tail_probs < -1e-12) or np.any(self.tail_probs > 1 + 1e-12):
            raise ProblemError("tail probabilities must lie in [0, 1]")
        if np.any(np.diff(self.tail_probs) > 1e-12):
            raise ProblemError("tail probabilities must be nonincreasing in the barrier")


def _call_curve_min(mu: DiscreteMarginal, barrier: float) -> float:
    """min over y in [0, B] of E[(S - y)^+] / (B - y), exactly.

    The call function is piecewise linear with kinks at the atoms, and on
    each linear piece the ratio has a one-signed derivative, so the minimum
    over [0, B] sits at 0 or at an atom below B. A uniform scan augmented
    with those candidates double-checks that claim on every call.
    """
    candidates = np.concatenate(
        ([0.0], mu.support[(mu.support >= 0.0) & (mu.support < barrier)])
    )
    cand_vals = mu.call_curve(candidates) / (barrier - candidates)
    best = float(cand_vals.min())

    scan = np.unique(
        np.concatenate((np.linspace(0.0, barrier, SCAN_POINTS, endpoint=False), candidates))
    )
    scan_best = float((mu.call_curve(scan) / (barrier - scan)).min())
    if abs(best - scan_best) > SCAN_TOL:
        raise ProblemError(
            f"candidate minimization of the tail ratio missed a dip at B={barrier}: "
            f"candidates give {best}, scan gives {scan_best}"
        )
    return min(best, 1.0)


def azema_yor_max_law(
    mu_T: DiscreteMarginal, s0: float, barriers: np.ndarray
) -> MaxLawCurve:
    """Law of the maximum of the Azema-Yor martingale with terminal law mu_T.

    The tail at each barrier is the Hardy-Littlewood ratio minimized over
    strike candidates; the expected maximum is s0 plus the trapezoid
    integral of the tail over the supplied barrier grid, so the grid should
    start just above s0 and extend past the support for an accurate price.
    """
    barriers = np.asarray(barriers, dtype=float)
    if abs(mu_T.mean() - s0) > 1e-10:
        raise ProblemError(
            f"terminal marginal has mean {mu_T.mean()!r}, expected the start price {s0!r}"
        )
    if barriers.size == 0 or np.any(barriers <= s0):
        raise ProblemError("barriers must all exceed the start price")

    tails = np.array([_call_curve_min(mu_T, float(b)) for b in barriers])
    price = s0 + float(np.trapezoid(tails, barriers))
    return MaxLawCurve(barriers=barriers, tail_probs=tails, price=price)


def digital_reference(barrier: float) -> float:
    """Exact one-touch value for the symmetric two-point terminal law.

    With the price starting at 0.5 and ending at 0 or 1 with equal
    probability, the best martingale reaches a barrier in (0.5, 1] with
    probability 1/(2B).
    """
    if not 0.5 < barrier <= 1.0:
        raise ProblemError(f"barrier {barrier!r} outside (0.5, 1]")
    return 1.0 / (2.0 * barrier)


@dataclass(frozen=True)
class LateEarlyValues:
    """Bounds attained by moving all mass at the last or first step."""

    lower_value: float
    upper_value: float


def late_early_values(
    mu_0: DiscreteMarginal, mu_T: DiscreteMarginal, horizon: int, f
) -> LateEarlyValues:
    """Values of the time-averaged convex payoff under the two extreme plans.

    The payoff is the average of f over s_0 .. s_T. Keeping the price
    frozen until the final step scores f on mu_0 for T of the T+1 terms
    (the lower value for convex f); spreading at the first step mirrors it.
    f must be convex for these to be the optimal bounds; that is not
    checked here.
    """
    if horizon < 1:
        raise ProblemError("horizon must be at least 1")
    report = check_convex_order(mu_0, mu_T)
    if not report.ordered:
        raise ProblemError(
            f"marginals are not in convex order (worst strike {report.worst_strike}, "
            f"gap {report.gap})"
        )
    e0 = float(mu_0.expectation(f))
    eT = float(mu_T.expectation(f))
    lower = (horizon * e0 + eT) / (horizon + 1)
    upper = (e0 + horizon * eT) / (horizon + 1)
    return LateEarlyValues(lower_value=lower, upper_value=upper)
