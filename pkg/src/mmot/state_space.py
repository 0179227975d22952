"""Discrete state spaces for path-dependent pricing problems.

The price process lives on a finite grid per time step. Path dependence is
carried by a auxiliary feature process (running max, running mean, barrier
indicator, ...) updated by a deterministic recursion
``x_t = h_t(s_t, s_{t-1}, x_{t-1})`` with ``x_0 = h_0(s_0)``. The joint state
at time t is a (price, feature) pair.

Layout convention used everywhere in this package: joint states are
enumerated price-fastest. With 1-based indices the joint index is

    joint = i_price + (i_aux - 1) * n_price

so a joint-state vector ``v`` reshaped to ``(n_aux, n_price)`` has one row
per feature value. Internally arrays are 0-based with the same ordering;
``tile_price_vector`` and ``sum_over_aux`` are the two helpers that encode
the layout, use them instead of reshaping by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GridError

AUX_KINDS = (
    "max",
    "min",
    "arithmetic_mean",
    "indicator_chain",
    "realized_variance",
    "occupation_count",
    "dual_expiry_memory",
    "capped_return_sum",
    "custom_table",
    "none",
)

# Feature-grid sizes beyond this abort grid construction: the joint state
# space (and with it every stage matrix) scales linearly in it.
DEFAULT_AUX_CAP = 10_000

# Default snapping tolerance, relative to the span of the raw feature values
# produced at one time step.
SNAP_REL_DEFAULT = 1e-9


@dataclass(frozen=True)
class AuxRecursion:
    """Deterministic update rule for the auxiliary feature process.

    kind selects the recursion family, params its constants:

    - "max" / "min" / "arithmetic_mean": running extremum / mean, no params.
    - "indicator_chain": 0/1 memory of set visits. Either
      ``params={"barrier": b}`` (has the price ever reached b from below) or
      ``params={"sets": [lo, hi] | [[lo, hi], ...], "combine": "any"|"all"}``.
      "any" latches to 1 on the first visit, "all" starts at 1 and drops to 0
      on the first miss.
    - "realized_variance": running mean of squared log returns, needs
      strictly positive price grids.
    - "occupation_count": number of time steps spent in a set (same set
      params as indicator_chain, counted from t=0).
    - "dual_expiry_memory": ``params={"memory_time": t0}``; the feature is 0
      before t0 and freezes the time-t0 price from then on.
    - "capped_return_sum": ``params={"local_cap": c, "local_floor": f}``
      (floor defaults to 0); sum of clipped simple returns, needs strictly
      positive price grids.
    - "custom_table": ``params={"init": f0, "step": f}`` with scalar or
      vectorized callables ``f0(s)`` and ``f(t, s_now, s_prev, x_prev)``.
    - "none": single dummy feature value 0, for problems whose payoff
      decouples over price pairs alone.

    snap_tolerance, when given, is the absolute tolerance used to merge
    nearly-equal feature values into one grid point; the default is
    1e-9 relative to the span of the values produced at that time step.
    """

    kind: str
    params: dict = field(default_factory=dict)
    snap_tolerance: Optional[float] = None

    def __post_init__(self):
        if self.kind not in AUX_KINDS:
            raise GridError(f"unknown aux recursion kind {self.kind!r}")
        if self.kind == "dual_expiry_memory":
            t0 = self.params.get("memory_time")
            if not isinstance(t0, int) or t0 < 1:
                raise GridError("dual_expiry_memory needs integer memory_time >= 1")
        if self.kind == "capped_return_sum" and "local_cap" not in self.params:
            raise GridError("capped_return_sum needs a local_cap parameter")
        if self.kind == "custom_table":
            if not callable(self.params.get("init")) or not callable(self.params.get("step")):
                raise GridError("custom_table needs callables 'init' and 'step'")
        if self.kind in ("indicator_chain", "occupation_count"):
            if ("barrier" in self.params) == ("sets" in self.params):
                raise GridError(f"{self.kind} needs either 'barrier' or 'sets'")

    @property
    def uses_prev_price(self) -> bool:
        """Whether the step rule looks at the previous price at all."""
        return self.kind in ("realized_variance", "capped_return_sum", "custom_table")

    def _indicator(self, t: int, s) -> np.ndarray:
        if "barrier" in self.params:
            lo, hi = float(self.params["barrier"]), np.inf
        else:
            sets = self.params["sets"]
            if np.ndim(sets[0]) == 0:
                lo, hi = sets
            else:
                lo, hi = sets[t]
        s = np.asarray(s, dtype=float)
        return ((s >= lo) & (s <= hi)).astype(float)

    def initial_values(self, s) -> np.ndarray:
        """Feature value at time 0 as a function of the initial price."""
        s = np.asarray(s, dtype=float)
        if self.kind in ("max", "min", "arithmetic_mean"):
            return s.copy()
        if self.kind in ("indicator_chain", "occupation_count"):
            return self._indicator(0, s)
        if self.kind == "custom_table":
            return np.vectorize(self.params["init"], otypes=[float])(s)
        # realized_variance, dual_expiry_memory, capped_return_sum, none
        return np.zeros_like(s)

    def step(self, t: int, s_now, s_prev, x_prev) -> np.ndarray:
        """Apply the update rule at time t >= 1. Arguments broadcast."""
        s_now, s_prev, x_prev = np.broadcast_arrays(
            np.asarray(s_now, dtype=float),
            np.asarray(s_prev, dtype=float),
            np.asarray(x_prev, dtype=float),
        )
        if self.kind == "max":
            return np.maximum(s_now, x_prev)
        if self.kind == "min":
            return np.minimum(s_now, x_prev)
        if self.kind == "arithmetic_mean":
            return (s_now + t * x_prev) / (t + 1.0)
        if self.kind == "indicator_chain":
            ind = self._indicator(t, s_now)
            combine = self.params.get("combine", "any")
            if combine == "all":
                return x_prev * ind
            return np.maximum(x_prev, ind)
        if self.kind == "realized_variance":
            r2 = np.log(s_now / s_prev) ** 2
            return x_prev * (t - 1.0) / t + r2 / t
        if self.kind == "occupation_count":
            return x_prev + self._indicator(t, s_now)
        if self.kind == "dual_expiry_memory":
            if t == self.params["memory_time"]:
                return s_now.copy()
            return x_prev.copy()
        if self.kind == "capped_return_sum":
            lo = float(self.params.get("local_floor", 0.0))
            hi = float(self.params["local_cap"])
            ret = (s_now - s_prev) / s_prev
            return x_prev + np.clip(ret, lo, hi)
        if self.kind == "custom_table":
            return np.vectorize(self.params["step"], otypes=[float])(t, s_now, s_prev, x_prev)
        # none
        return np.zeros_like(x_prev)


@dataclass(frozen=True)
class StateGrid:
    """Per-time price and feature supports; joint states are their product."""

    price_support: tuple
    aux_support: tuple

    def __post_init__(self):
        if len(self.price_support) != len(self.aux_support):
            raise GridError("price and feature supports must cover the same times")
        if len(self.price_support) < 2:
            raise GridError("need at least times 0 and 1")
        for t, (s, x) in enumerate(zip(self.price_support, self.aux_support)):
            for name, arr in (("price", s), ("feature", x)):
                arr = np.asarray(arr)
                if arr.ndim != 1 or arr.size == 0:
                    raise GridError(f"{name} support at t={t} must be a nonempty vector")
                if arr.size > 1 and not np.all(np.diff(arr) > 0):
                    raise GridError(f"{name} support at t={t} must be strictly increasing")

    @property
    def horizon(self) -> int:
        """Number of time steps T; times run 0..T."""
        return len(self.price_support) - 1

    def n_price(self, t: int) -> int:
        return len(self.price_support[t])

    def n_aux(self, t: int) -> int:
        return len(self.aux_support[t])

    def joint_size(self, t: int) -> int:
        return self.n_price(t) * self.n_aux(t)

    @property
    def is_markov_reduced(self) -> bool:
        """True when every feature grid is a single point (no path memory)."""
        return all(self.n_aux(t) == 1 for t in range(self.horizon + 1))

    def state_values(self, t: int):
        """(price, feature) value arrays of length joint_size(t), layout order."""
        s = np.asarray(self.price_support[t], dtype=float)
        x = np.asarray(self.aux_support[t], dtype=float)
        return np.tile(s, len(x)), np.repeat(x, len(s))


def joint_index(i_price: int, i_aux: int, n_price: int) -> int:
    """1-based joint index of (price index, feature index), price fastest."""
    if not (1 <= i_price <= n_price) or i_aux < 1:
        raise GridError(f"index pair ({i_price}, {i_aux}) out of range for n_price={n_price}")
    return i_price + (i_aux - 1) * n_price


def split_index(i: int, n_price: int) -> tuple:
    """Inverse of joint_index: 1-based joint index -> (i_price, i_aux)."""
    if i < 1:
        raise GridError(f"joint index {i} out of range")
    i0 = i - 1
    return i0 % n_price + 1, i0 // n_price + 1


def tile_price_vector(values: np.ndarray, n_aux: int) -> np.ndarray:
    """Lift a per-price vector to the joint layout (constant across features)."""
    return np.tile(np.asarray(values, dtype=float), n_aux)


def sum_over_aux(values: np.ndarray, n_price: int, n_aux: int) -> np.ndarray:
    """Project a joint-layout vector to the price grid by summing features."""
    v = np.asarray(values, dtype=float)
    if v.size != n_price * n_aux:
        raise GridError(f"vector of size {v.size} is not {n_price} x {n_aux}")
    return v.reshape(n_aux, n_price).sum(axis=0)


def sum_over_price(values: np.ndarray, n_price: int, n_aux: int) -> np.ndarray:
    """Project a joint-layout vector to the feature grid by summing prices."""
    v = np.asarray(values, dtype=float)
    if v.size != n_price * n_aux:
        raise GridError(f"vector of size {v.size} is not {n_price} x {n_aux}")
    return v.reshape(n_aux, n_price).sum(axis=1)


def build_price_grids(entries: Sequence) -> tuple:
    """Build per-time price grids from literal points or (interval, count).

    Each entry is either ``{"points": [...]}`` or
    ``{"interval": (a, b), "n": k}``; a 1-point interval collapses to its
    midpoint so that ``([0, 1], 1)`` gives the grid ``{0.5}``.
    """
    grids = []
    for t, entry in enumerate(entries):
        if isinstance(entry, dict) and "points" in entry:
            g = np.asarray(entry["points"], dtype=float)
        elif isinstance(entry, dict) and "interval" in entry:
            a, b = (float(v) for v in entry["interval"])
            n = int(entry["n"])
            if n < 1 or b < a:
                raise GridError(f"bad interval spec at t={t}: {entry}")
            if n == 1:
                g = np.array([(a + b) / 2.0])
            else:
                g = np.linspace(a, b, n)
        else:
            g = np.asarray(entry, dtype=float)
        if g.ndim != 1 or g.size == 0:
            raise GridError(f"price grid at t={t} must be a nonempty vector")
        if g.size > 1 and not np.all(np.diff(g) > 0):
            raise GridError(f"price grid at t={t} must be strictly increasing")
        grids.append(g)
    return tuple(grids)


def _snap_representatives(values: np.ndarray, tol: float) -> np.ndarray:
    """Merge values closer than tol into single representatives (their mean).

    Groups are formed by chaining adjacent gaps <= tol; a chain whose total
    span exceeds tol means the tolerance is badly chosen for this data and
    raises instead of silently merging distinguishable values.
    """
    v = np.unique(np.asarray(values, dtype=float))
    if not np.all(np.isfinite(v)):
        raise GridError("feature recursion produced non-finite values")
    if tol <= 0 or v.size < 2:
        return v
    boundaries = np.flatnonzero(np.diff(v) > tol)
    starts = np.concatenate(([0], boundaries + 1))
    ends = np.concatenate((boundaries + 1, [v.size]))
    reps = np.empty(starts.size)
    for k, (a, b) in enumerate(zip(starts, ends)):
        if v[b - 1] - v[a] > tol:
            raise GridError(
                f"snapping collision: values spanning {v[b - 1] - v[a]:.3e} "
                f"(> tolerance {tol:.3e}) would merge; pick a smaller snap_tolerance"
            )
        reps[k] = v[a:b].mean()
    return reps


def snap_to_grid(values: np.ndarray, grid: np.ndarray, tol: float) -> np.ndarray:
    """Indices (0-based) of the grid points matching values within tol."""
    v = np.asarray(values, dtype=float)
    g = np.asarray(grid, dtype=float)
    pos = np.searchsorted(g, v)
    left = np.clip(pos - 1, 0, g.size - 1)
    right = np.clip(pos, 0, g.size - 1)
    idx = np.where(np.abs(v - g[left]) <= np.abs(g[right] - v), left, right)
    err = np.abs(v - g[idx])
    if err.size and err.max() > tol:
        bad = float(v.flat[int(np.argmax(err))])
        raise GridError(
            f"value {bad!r} is {err.max():.3e} away from the nearest grid point "
            f"(tolerance {tol:.3e}); grid does not close under the recursion"
        )
    return idx


def _rationalize(grids) -> Optional[list]:
    """Decode float grids as small-denominator fractions, or None.

    Grid values that were meant as rationals (lattices like k/99) do not
    always survive the trip through binary floats; recovering the intended
    fraction lets the mean recursion run in exact arithmetic, which keeps the
    reachable-value count exact instead of tolerance-dependent.
    """
    out = []
    for g in grids:
        fr = []
        for v in np.asarray(g, dtype=float):
            f = Fraction(v).limit_denominator(10_000)
            if abs(float(f) - v) > 1e-13 * max(1.0, abs(v)):
                return None
            fr.append(f)
        out.append(fr)
    return out


def _mean_grids_exact(price_fracs: list, cap: int) -> Optional[list]:
    """Reachable running-mean values via exact fractions; None if capped out."""
    current = sorted(set(price_fracs[0]))
    grids = [np.array([float(f) for f in current])]
    for t in range(1, len(price_fracs)):
        nxt = {(fs + t * fx) / (t + 1) for fs in price_fracs[t] for fx in current}
        if len(nxt) > cap:
            return None
        current = sorted(nxt)
        grids.append(np.array([float(f) for f in current]))
    return grids


def build_aux_grids(
    price_grids: Sequence[np.ndarray],
    recursion: AuxRecursion,
    max_points: int = DEFAULT_AUX_CAP,
) -> tuple:
    """Forward-reachable feature grids, one per time, closed under the step rule.

    Starting from the image of the initial rule on the time-0 price grid, each
    later grid collects the step-rule images over all (current price, previous
    price, previous feature) combinations, merged by the snapping tolerance.
    The construction is deterministic, so rebuilding from its own output
    reproduces it exactly. Raises when a feature grid would exceed max_points.
    """
    T = len(price_grids) - 1
    if recursion.kind == "none":
        return tuple(np.array([0.0]) for _ in range(T + 1))

    if recursion.kind == "arithmetic_mean" and recursion.snap_tolerance is None:
        fracs = _rationalize(price_grids)
        if fracs is not None:
            exact = _mean_grids_exact(fracs, max_points)
            if exact is None:
                raise GridError(
                    f"feature grid would exceed {max_points} points; raise max_points "
                    "or set a coarser snap_tolerance"
                )
            return tuple(exact)

    grids = []
    x0 = recursion.initial_values(np.asarray(price_grids[0], dtype=float))
    grids.append(_snap_representatives(x0, _tol_for(recursion, x0)))
    for t in range(1, T + 1):
        s_now = np.asarray(price_grids[t], dtype=float)[:, None, None]
        s_prev = np.asarray(price_grids[t - 1], dtype=float)[None, :, None]
        if not recursion.uses_prev_price:
            s_prev = s_prev[:, :1, :]
        x_prev = grids[t - 1][None, None, :]
        vals = recursion.step(t, s_now, s_prev, x_prev).ravel()
        reps = _snap_representatives(vals, _tol_for(recursion, vals))
        if reps.size > max_points:
            raise GridError(
                f"feature grid at t={t} has {reps.size} points (> cap {max_points}); "
                "raise max_points or coarsen snap_tolerance"
            )
        grids.append(reps)
    return tuple(grids)


def _tol_for(recursion: AuxRecursion, values: np.ndarray) -> float:
    if recursion.snap_tolerance is not None:
        return float(recursion.snap_tolerance)
    v = np.asarray(values, dtype=float)
    span = float(v.max() - v.min()) if v.size else 0.0
    return SNAP_REL_DEFAULT * span


def grid_snap_tolerance(recursion: AuxRecursion, grid_t: np.ndarray) -> float:
    """Tolerance for matching step-rule images against a stored feature grid."""
    if recursion.snap_tolerance is not None:
        return float(recursion.snap_tolerance)
    g = np.asarray(grid_t, dtype=float)
    span = float(g.max() - g.min()) if g.size > 1 else 1.0
    # twice the build-time tolerance: images sit within one tolerance of a
    # representative that may itself sit anywhere inside its merge group
    return 2.0 * SNAP_REL_DEFAULT * max(span, 1.0)


def delta_matrix(grid: StateGrid, t: int) -> np.ndarray:
    """Dense price-increment matrix between joint states at t-1 and t.

    Entry (i, j) is the price at state j minus the price at state i; rows
    with the same price component are identical since the feature carries no
    price information.
    """
    if not (1 <= t <= grid.horizon):
        raise GridError(f"stage index t={t} out of range 1..{grid.horizon}")
    s_prev = np.asarray(grid.price_support[t - 1], dtype=float)
    s_now = np.asarray(grid.price_support[t], dtype=float)
    base = s_now[None, :] - s_prev[:, None]
    return np.tile(base, (grid.n_aux(t - 1), grid.n_aux(t)))
