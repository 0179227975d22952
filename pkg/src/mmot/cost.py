"""Stage payoffs, feasibility masks and Gibbs kernels.

A path payoff that decouples over time steps is described by per-stage
functions phi_t(s_prev, x_prev, s_now, x_now); the total payoff of a path is
the sum of its stage values. Transitions that violate the feature recursion
(x_now != h_t(s_now, s_prev, x_prev)) are forbidden: their kernel entry is
an exact zero, which makes every inner product ignore them without any
big-penalty arithmetic.

Stage matrices are stored sparse. The feature recursion is deterministic,
so each (previous state, next price) pair has exactly one feasible next
feature, and a stage holds n_{t-1} * n_price(t) nonzeros instead of
n_{t-1} * n_t entries. Dense accessors exist for small problems and tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import CostError, InfeasibleError
from .state_space import (
    AuxRecursion,
    StateGrid,
    grid_snap_tolerance,
    snap_to_grid,
)

PAYOFF_KINDS = (
    "variance_swap_stage",
    "asian_terminal",
    "lookback_terminal",
    "digital_terminal",
    "straddle_terminal",
    "sum_of_convex",
    "custom",
)

PRODUCT_NAMES = (
    "max_of_max",
    "floating_lookback_put",
    "up_and_in_call",
    "asian_straddle",
    "average_price_call",
    "digital",
    "variance_swap",
    "parisian_put",
    "forward_start_call",
    "cliquet",
)


@dataclass(frozen=True)
class StagePayoff:
    """One additive payoff term, evaluated stage by stage.

    - "variance_swap_stage": squared log return each stage, minus
      params["strike_variance"] / T when given.
    - "asian_terminal": params["f"](x) at the final stage only.
    - "lookback_terminal": params["f"](s, x) at the final stage only.
    - "digital_terminal": the final feature value itself.
    - "straddle_terminal": |x - strike| at the final stage.
    - "sum_of_convex": params["f"] applied to every price and averaged,
      phi_1 = (f(s_0) + f(s_1)) / (T+1), phi_t = f(s_t) / (T+1) after.
    - "custom": params["stages"] maps t (1..T) to a vectorized function of
      (s_prev, x_prev, s_now, x_now); missing stages contribute 0.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PAYOFF_KINDS:
            raise CostError(f"unknown stage payoff kind {self.kind!r}")
        needs = {
            "asian_terminal": "f",
            "lookback_terminal": "f",
            "straddle_terminal": "strike",
            "sum_of_convex": "f",
            "custom": "stages",
        }
        key = needs.get(self.kind)
        if key is not None and key not in self.params:
            raise CostError(f"{self.kind} payoff needs a {key!r} parameter")

    @property
    def needs_positive_prices(self) -> bool:
        return self.kind == "variance_swap_stage"

    def stage_values(self, t: int, horizon: int, s_prev, x_prev, s_now, x_now):
        """Stage-t contribution, broadcasting over state arrays."""
        if self.kind == "variance_swap_stage":
            v = np.log(np.asarray(s_now, float) / np.asarray(s_prev, float)) ** 2
            sv = self.params.get("strike_variance")
            if sv is not None:
                v = v - float(sv) / horizon
            return v
        if self.kind == "sum_of_convex":
            f = self.params["f"]
            v = np.asarray(f(np.asarray(s_now, float)), dtype=float) / (horizon + 1.0)
            if t == 1:
                v = v + np.asarray(f(np.asarray(s_prev, float)), dtype=float) / (horizon + 1.0)
            return np.broadcast_arrays(v, np.asarray(x_now, float))[0]
        if t != horizon and self.kind != "custom":
            return np.zeros(np.broadcast(np.asarray(s_now), np.asarray(x_now)).shape)
        if self.kind == "asian_terminal":
            return np.asarray(self.params["f"](np.asarray(x_now, float)), dtype=float)
        if self.kind == "lookback_terminal":
            return np.asarray(
                self.params["f"](np.asarray(s_now, float), np.asarray(x_now, float)),
                dtype=float,
            )
        if self.kind == "digital_terminal":
            return np.asarray(x_now, dtype=float).copy()
        if self.kind == "straddle_terminal":
            return np.abs(np.asarray(x_now, float) - float(self.params["strike"]))
        # custom
        fn = self.params["stages"].get(t)
        if fn is None:
            return np.zeros(np.broadcast(np.asarray(s_now), np.asarray(x_now)).shape)
        return np.asarray(fn(s_prev, x_prev, s_now, x_now), dtype=float)


def payoff_library(name: str, params: Optional[dict] = None):
    """Feature recursion and stage payoffs for a named product.

    Returns (AuxRecursion, list of StagePayoff). Parameters by product:
    strike (up_and_in_call, asian_straddle, average_price_call,
    parisian_put), barrier (up_and_in_call, digital), strike_variance
    (variance_swap, optional), sets + window (parisian_put), memory_time
    (forward_start_call), local_cap / local_floor / global_floor (cliquet).
    """
    p = dict(params or {})

    def need(key):
        if key not in p:
            raise CostError(f"product {name!r} needs parameter {key!r}")
        return p[key]

    if name == "max_of_max":
        return AuxRecursion("max"), [StagePayoff("lookback_terminal", {"f": lambda s, x: x})]
    if name == "floating_lookback_put":
        return AuxRecursion("max"), [StagePayoff("lookback_terminal", {"f": lambda s, x: x - s})]
    if name == "up_and_in_call":
        strike = float(need("strike"))
        rec = AuxRecursion("indicator_chain", {"barrier": float(need("barrier"))})
        f = lambda s, x: x * np.maximum(s - strike, 0.0)
        return rec, [StagePayoff("lookback_terminal", {"f": f})]
    if name == "asian_straddle":
        return (
            AuxRecursion("arithmetic_mean"),
            [StagePayoff("straddle_terminal", {"strike": float(need("strike"))})],
        )
    if name == "average_price_call":
        strike = float(need("strike"))
        return (
            AuxRecursion("arithmetic_mean"),
            [StagePayoff("asian_terminal", {"f": lambda x: np.maximum(x - strike, 0.0)})],
        )
    if name == "digital":
        rec = AuxRecursion("indicator_chain", {"barrier": float(need("barrier"))})
        return rec, [StagePayoff("digital_terminal")]
    if name == "variance_swap":
        sv = p.get("strike_variance")
        pay = StagePayoff("variance_swap_stage", {} if sv is None else {"strike_variance": float(sv)})
        return AuxRecursion("none"), [pay]
    if name == "parisian_put":
        strike, window = float(need("strike")), float(need("window"))
        rec = AuxRecursion("occupation_count", {"sets": need("sets")})
        f = lambda s, x: np.maximum(strike - s, 0.0) * (x >= window)
        return rec, [StagePayoff("lookback_terminal", {"f": f})]
    if name == "forward_start_call":
        rec = AuxRecursion("dual_expiry_memory", {"memory_time": int(need("memory_time"))})
        k = float(p.get("moneyness", 1.0))
        return rec, [StagePayoff("lookback_terminal", {"f": lambda s, x: np.maximum(s - k * x, 0.0)})]
    if name == "cliquet":
        rec = AuxRecursion(
            "capped_return_sum",
            {"local_cap": float(need("local_cap")), "local_floor": float(p.get("local_floor", 0.0))},
        )
        gf = float(p.get("global_floor", 0.0))
        return rec, [StagePayoff("asian_terminal", {"f": lambda x: np.maximum(x, gf)})]
    raise CostError(f"unknown product {name!r}; known: {', '.join(PRODUCT_NAMES)}")


@dataclass
class StageOperator:
    """Sparse stage matrix in CSR layout shared by payoff, increment, kernel.

    Rows are joint states at t-1, columns joint states at t, both in the
    price-fastest layout. indices within a row are sorted. Treat instances
    as immutable after assembly.
    """

    n_from: int
    n_to: int
    indptr: np.ndarray
    indices: np.ndarray
    phi_data: np.ndarray
    delta_data: np.ndarray
    kernel_data: np.ndarray

    @cached_property
    def row_index(self) -> np.ndarray:
        """Row of each stored nonzero, aligned with indices/data arrays."""
        return np.repeat(np.arange(self.n_from), np.diff(self.indptr))

    def matrix(self, data: np.ndarray) -> sp.csr_matrix:
        """CSR matrix over this stage's sparsity pattern with given data."""
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n_from, self.n_to))

    def feasible_dense(self) -> np.ndarray:
        out = np.zeros((self.n_from, self.n_to), dtype=bool)
        out[self.row_index, self.indices] = True
        return out

    def phi_dense(self) -> np.ndarray:
        """Stage payoff on feasible entries, 0 elsewhere (see feasible_dense)."""
        out = np.zeros((self.n_from, self.n_to))
        out[self.row_index, self.indices] = self.phi_data
        return out

    def delta_dense(self) -> np.ndarray:
        """Price increment on feasible entries, 0 elsewhere."""
        out = np.zeros((self.n_from, self.n_to))
        out[self.row_index, self.indices] = self.delta_data
        return out

    def kernel_dense(self) -> np.ndarray:
        out = np.zeros((self.n_from, self.n_to))
        out[self.row_index, self.indices] = self.kernel_data
        return out


@dataclass
class StageCost:
    """All stage operators of one problem plus the regularization strength.

    direction "lower" prices the cheapest consistent model, "upper" the
    dearest; the sign only enters the kernels (and hence the solve), phi_data
    always stores the true payoff values.
    """

    grid: StateGrid
    epsilon: float
    direction: str
    stages: tuple
    reachable: tuple

    @property
    def sign(self) -> float:
        return 1.0 if self.direction == "lower" else -1.0

    def stage(self, t: int) -> StageOperator:
        """Stage operator for the step t-1 -> t, t in 1..horizon."""
        if not (1 <= t <= self.grid.horizon):
            raise CostError(f"stage index t={t} out of range 1..{self.grid.horizon}")
        return self.stages[t - 1]

    def with_epsilon(self, epsilon: float) -> "StageCost":
        """Same problem at a different regularization strength."""
        stages = tuple(
            StageOperator(
                op.n_from,
                op.n_to,
                op.indptr,
                op.indices,
                op.phi_data,
                op.delta_data,
                _kernel(op.phi_data, epsilon, self.sign),
            )
            for op in self.stages
        )
        return StageCost(self.grid, float(epsilon), self.direction, stages, self.reachable)


def _kernel(phi_data: np.ndarray, epsilon: float, sign: float) -> np.ndarray:
    if epsilon <= 0:
        raise CostError(f"epsilon must be positive, got {epsilon!r}")
    with np.errstate(over="ignore"):
        k = np.exp(-sign * phi_data / epsilon)
    if not np.all(np.isfinite(k)):
        raise CostError(
            "kernel overflow: payoff range too large for this epsilon "
            "(largest exponent "
            f"{np.max(-sign * phi_data) / epsilon:.1f})"
        )
    return k


def assemble_stage_costs(
    grid: StateGrid,
    recursion: AuxRecursion,
    payoffs: Sequence[StagePayoff],
    epsilon: float,
    direction: str = "lower",
) -> StageCost:
    """Build all stage operators and verify the state space has no dead ends.

    Feasible transitions are those whose next feature matches the recursion
    image of the current state; at the first stage the starting feature must
    additionally match the initial rule. Reachability is propagated through
    positive kernel entries from the feasible time-0 states; a reachable
    state whose kernel row is entirely zero would later divide by zero in
    the solver, so it is reported here, with its time and state values.
    """
    if direction not in ("lower", "upper"):
        raise CostError(f"direction must be 'lower' or 'upper', got {direction!r}")
    if isinstance(payoffs, StagePayoff):
        payoffs = [payoffs]
    T = grid.horizon
    if any(p.needs_positive_prices for p in payoffs) or recursion.kind in (
        "realized_variance",
        "capped_return_sum",
    ):
        for t in range(T + 1):
            if np.asarray(grid.price_support[t], float).min() <= 0:
                raise CostError(
                    "log/relative-return payoffs need strictly positive price grids "
                    f"(grid at t={t} is not)"
                )

    s0 = np.asarray(grid.price_support[0], dtype=float)
    x0_grid = np.asarray(grid.aux_support[0], dtype=float)
    start_aux = snap_to_grid(
        recursion.initial_values(s0), x0_grid, grid_snap_tolerance(recursion, x0_grid)
    )

    stages = []
    reachable = [None] * (T + 1)
    nS0, nX0 = grid.n_price(0), grid.n_aux(0)
    reach0 = np.zeros(grid.joint_size(0), dtype=bool)
    reach0[np.arange(nS0) + start_aux * nS0] = True
    reachable[0] = reach0

    for t in range(1, T + 1):
        op = _assemble_stage(grid, recursion, payoffs, epsilon, direction, t)
        if t == 1:
            keep = reach0[op.row_index]
            op = _filter_nonzeros(op, keep)
        stages.append(op)

        row_peak = np.zeros(op.n_from)
        np.maximum.at(row_peak, op.row_index, op.kernel_data)
        dead = reachable[t - 1] & (row_peak <= 0.0)
        if np.any(dead):
            i = int(np.flatnonzero(dead)[0])
            s_val, x_val = (arr[i] for arr in grid.state_values(t - 1))
            raise InfeasibleError(
                f"state (s={s_val!r}, x={x_val!r}) at time {t - 1} is a dead end: "
                "no feasible transition with positive kernel weight leaves it"
            )
        nxt = np.zeros(op.n_to, dtype=bool)
        alive = reachable[t - 1][op.row_index] & (op.kernel_data > 0)
        nxt[op.indices[alive]] = True
        reachable[t] = nxt

    return StageCost(grid, float(epsilon), direction, tuple(stages), tuple(reachable))


def _assemble_stage(grid, recursion, payoffs, epsilon, direction, t):
    T = grid.horizon
    nSp, nXp = grid.n_price(t - 1), grid.n_aux(t - 1)
    nSn = grid.n_price(t)
    Sp = np.asarray(grid.price_support[t - 1], dtype=float)
    Sn = np.asarray(grid.price_support[t], dtype=float)
    Xp = np.asarray(grid.aux_support[t - 1], dtype=float)
    Xn = np.asarray(grid.aux_support[t], dtype=float)
    tol = grid_snap_tolerance(recursion, Xn)

    if recursion.uses_prev_price:
        vals = recursion.step(t, Sn[None, None, :], Sp[None, :, None], Xp[:, None, None])
        img = snap_to_grid(vals.ravel(), Xn, tol).reshape(nXp, nSp, nSn)
    else:
        vals = recursion.step(t, Sn[None, :], 0.0, Xp[:, None])
        img = np.broadcast_to(
            snap_to_grid(vals.ravel(), Xn, tol).reshape(nXp, 1, nSn), (nXp, nSp, nSn)
        )

    n_rows = nXp * nSp
    img = np.ascontiguousarray(img).reshape(n_rows, nSn)
    cols = np.arange(nSn)[None, :] + img * nSn

    s_prev = np.tile(Sp, nXp)[:, None]
    x_prev = np.repeat(Xp, nSp)[:, None]
    s_now = np.broadcast_to(Sn[None, :], (n_rows, nSn))
    x_now = Xn[img]
    delta = s_now - s_prev

    phi = np.zeros((n_rows, nSn))
    for p in payoffs:
        phi = phi + p.stage_values(t, T, s_prev, x_prev, s_now, x_now)
    if not np.all(np.isfinite(phi)):
        raise CostError(f"stage payoff at t={t} produced non-finite values")

    order = np.argsort(cols, axis=1, kind="stable")
    cols = np.take_along_axis(cols, order, axis=1)
    phi = np.take_along_axis(phi, order, axis=1)
    delta = np.take_along_axis(delta, order, axis=1)

    sign = 1.0 if direction == "lower" else -1.0
    phi_data = phi.ravel()
    return StageOperator(
        n_from=n_rows,
        n_to=grid.joint_size(t),
        indptr=np.arange(n_rows + 1) * nSn,
        indices=cols.ravel(),
        phi_data=phi_data,
        delta_data=delta.ravel(),
        kernel_data=_kernel(phi_data, epsilon, sign),
    )


def _filter_nonzeros(op: StageOperator, keep: np.ndarray) -> StageOperator:
    counts = np.zeros(op.n_from, dtype=np.int64)
    np.add.at(counts, op.row_index[keep], 1)
    return StageOperator(
        n_from=op.n_from,
        n_to=op.n_to,
        indptr=np.concatenate(([0], np.cumsum(counts))),
        indices=op.indices[keep],
        phi_data=op.phi_data[keep],
        delta_data=op.delta_data[keep],
        kernel_data=op.kernel_data[keep],
    )
