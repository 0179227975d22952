"""Structured dual ascent for martingale transport with fixed marginals.

The regularized problem is solved entirely through its dual variables: one
price-indexed vector u_t = exp(lambda_t / epsilon) per constrained time and
one joint-state vector gamma_t per time step, entering the model

    Q = (stage kernels) * (u factors at constrained times) * exp(gamma * price increment / epsilon).

All projections of Q needed by the coordinate updates reduce to chains of
sparse matrix-vector products: a forward message accumulates the chain up to
t, a backward message from T down to t, and their product is the marginal of
Q at t. A sweep walks forward refreshing messages and solving each marginal
block in closed form, then backward solving each martingale block by a
damped Newton iteration; messages are recomputed incrementally so every
update sees projections consistent with the current duals.

Messages are renormalized to unit max-norm after every step, with the log of
the scale carried separately; u vectors get the same treatment. All update
formulas are ratios in which the scales cancel, so the renormalization
changes nothing mathematically while keeping every stored array in floating
range even for small epsilon.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .cost import StageCost, StageOperator
from .errors import ConvergenceFailure, InfeasibleError, ProblemError
from .marginals import DiscreteMarginal, check_convex_order, check_irreducible, grid_weights
from .state_space import sum_over_aux, tile_price_vector


@dataclass
class Problem:
    """An assembled cost structure plus the prescribed marginals.

    marginals maps times to DiscreteMarginal; the set of keys is exactly the
    constrained time set. Unlisted times have free marginals.
    """

    cost: StageCost
    marginals: dict

    def __post_init__(self):
        T = self.cost.grid.horizon
        if not self.marginals:
            raise ProblemError("at least one time must carry a prescribed marginal")
        for t in self.marginals:
            if not (isinstance(t, (int, np.integer)) and 0 <= t <= T):
                raise ProblemError(f"marginal time {t!r} outside 0..{T}")
        self.constrained = tuple(sorted(int(t) for t in self.marginals))
        self.weights = {
            int(t): grid_weights(marg, self.cost.grid.price_support[int(t)])
            for t, marg in self.marginals.items()
        }

    def check_order(self, strict_irreducibility: bool = False) -> list:
        """Validate consecutive constrained pairs; returns the reports.

        Convex-order failure is a hard error (no martingale can fit the
        marginals). A reducible pair leaves the problem solvable but the
        dual optimizers may escape to infinity, which in practice means
        gamma running into its clamp; default is a warning.
        """
        out = []
        for ta, tb in zip(self.constrained, self.constrained[1:]):
            a, b = self.marginals[ta], self.marginals[tb]
            order = check_convex_order(a, b)
            if not order.ordered:
                raise InfeasibleError(
                    f"marginals at t={ta} and t={tb} are not in convex order "
                    f"(worst strike {order.worst_strike}, gap {order.gap:.3e})"
                )
            irr = check_irreducible(a, b)
            if not irr.irreducible:
                msg = (
                    f"marginal pair t={ta},{tb} is not irreducible "
                    f"(touching point z={irr.witness_z}); dual variables may "
                    "be unbounded and hit the gamma clamp"
                )
                if strict_irreducibility:
                    raise InfeasibleError(msg)
                warnings.warn(msg)
            out.append((ta, tb, order, irr))
        return out


@dataclass
class SolveOptions:
    marginal_tol: float = 1e-6
    martingale_tol: float = 1e-8
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    max_sweeps: int = 5000
    gamma_clamp: float = 700.0
    gamma_init: float = 0.0
    check_order: bool = True
    strict_irreducibility: bool = False
    track_dual: bool = True
    progress: Optional[Callable[["ResidualReport"], None]] = None


@dataclass
class ResidualReport:
    """Residuals of one sweep, each measured just before its block's update."""

    iteration: int
    marginal_res: dict
    martingale_res: dict
    dual_objective: float

    @property
    def worst_marginal(self) -> float:
        return max(self.marginal_res.values(), default=0.0)

    @property
    def worst_martingale(self) -> float:
        return max(self.martingale_res.values(), default=0.0)


@dataclass
class SolveHistory:
    reports: list = field(default_factory=list)
    dual_trace: list = field(default_factory=list)
    clamped_states: list = field(default_factory=list)
    converged: bool = False

    @property
    def sweeps(self) -> int:
        return len(self.reports)

    def residual_rows(self):
        """(iteration, t, kind, residual) rows for the residual log."""
        rows = []
        for rep in self.reports:
            for t in sorted(rep.marginal_res):
                rows.append((rep.iteration, t, "marginal", rep.marginal_res[t]))
            for t in sorted(rep.martingale_res):
                rows.append((rep.iteration, t, "martingale", rep.martingale_res[t]))
        return rows


class DualState:
    """Dual variables and messages of one solve, with their log scales.

    Stored vectors are linear-domain with a scalar log offset each: the true
    forward message at t is psi_fwd[t] * exp(log_fwd[t]), and likewise for
    backward messages and u. gamma is stored plainly (it is an exponent
    already). Kernel-times-martingale-factor stage matrices are cached and
    invalidated when their gamma changes.
    """

    def __init__(self, cost: StageCost, constrained: Sequence[int], gamma_init: float = 0.0):
        grid = cost.grid
        T = grid.horizon
        self.cost = cost
        self.epsilon = cost.epsilon
        self.constrained = tuple(sorted(constrained))
        if not self.constrained:
            raise ProblemError("constrained time set must be nonempty")
        self.u = {t: np.ones(grid.n_price(t)) for t in self.constrained}
        self.u_log = {t: 0.0 for t in self.constrained}
        self.gamma = [np.full(grid.joint_size(t), float(gamma_init)) for t in range(T)]
        self.psi_fwd = [np.ones(grid.joint_size(t)) for t in range(T + 1)]
        self.log_fwd = [0.0] * (T + 1)
        self.psi_bwd = [np.ones(grid.joint_size(t)) for t in range(T + 1)]
        self.log_bwd = [0.0] * (T + 1)
        self._kg = {}

    # -- dual accessors -------------------------------------------------

    def u_true(self, t: int) -> np.ndarray:
        return self.u[t] * np.exp(self.u_log[t])

    def lambda_at(self, t: int) -> np.ndarray:
        """lambda_t = epsilon * log u_t; -inf where u_t = 0 (zero-mass atom)."""
        with np.errstate(divide="ignore"):
            return self.epsilon * (np.log(self.u[t]) + self.u_log[t])

    def set_gamma(self, t: int, value: np.ndarray):
        self.gamma[t] = value
        self._kg.pop(t + 1, None)

    def set_u(self, t: int, u_lin: np.ndarray, u_log: float):
        self.u[t] = u_lin
        self.u_log[t] = float(u_log)

    # -- stage matrices -------------------------------------------------

    def kg_data(self, t: int) -> np.ndarray:
        """Kernel times martingale factor per stored nonzero of stage t."""
        if t not in self._kg:
            op = self.cost.stage(t)
            expo = self.gamma[t - 1][op.row_index] * op.delta_data / self.epsilon
            # exponent is kept in range by the gamma clamp during solves;
            # cap defensively for externally seeded gamma
            self._kg[t] = op.kernel_data * np.exp(np.minimum(expo, 700.0))
        return self._kg[t]

    def kg_matrix(self, t: int) -> sp.csr_matrix:
        op = self.cost.stage(t)
        return op.matrix(self.kg_data(t))

    # -- weighted message vectors --------------------------------------

    def fwd_weight(self, t: int):
        """Forward message times the u factor at t, as (linear, log scale)."""
        v, L = self.psi_fwd[t], self.log_fwd[t]
        if t in self.u:
            nx = self.cost.grid.n_aux(t)
            v = v * tile_price_vector(self.u[t], nx)
            L = L + self.u_log[t]
        return v, L

    def bwd_weight(self, t: int):
        """Backward message times the u factor at t, as (linear, log scale)."""
        v, L = self.psi_bwd[t], self.log_bwd[t]
        if t in self.u:
            nx = self.cost.grid.n_aux(t)
            v = v * tile_price_vector(self.u[t], nx)
            L = L + self.u_log[t]
        return v, L

    def joint_marginal(self, t: int):
        """Marginal of Q over joint states at t, as (linear, log scale)."""
        f, Lf = self.fwd_weight(t)
        lin = f * self.psi_bwd[t]
        return lin, Lf + self.log_bwd[t]

    def mass(self) -> float:
        """Total mass of Q under the current duals and fresh messages."""
        lin, L = self.joint_marginal(self.cost.grid.horizon)
        return float(lin.sum()) * float(np.exp(L))


def _renormalize(v: np.ndarray, L: float, where: str):
    peak = float(v.max()) if v.size else 0.0
    if peak <= 0.0 or not np.isfinite(peak):
        raise InfeasibleError(f"message vanished {where}: no feasible mass remains")
    return v / peak, L + float(np.log(peak))


def forward_step(state: DualState, t: int):
    """Recompute the forward message at t from the one at t-1."""
    v, L = state.fwd_weight(t - 1)
    v, L = _renormalize(v, L, f"entering time {t}")
    w = state.kg_matrix(t).T @ v
    state.psi_fwd[t], state.log_fwd[t] = _renormalize(w, L, f"at time {t}")


def backward_step(state: DualState, t: int):
    """Recompute the backward message at t from the one at t+1."""
    v, L = state.bwd_weight(t + 1)
    v, L = _renormalize(v, L, f"entering time {t} backward")
    w = state.kg_matrix(t + 1) @ v
    state.psi_bwd[t], state.log_bwd[t] = _renormalize(w, L, f"at time {t} backward")


def forward_messages(state: DualState) -> list:
    """Recompute all forward messages under the current duals."""
    grid = state.cost.grid
    state.psi_fwd[0] = np.ones(grid.joint_size(0))
    state.log_fwd[0] = 0.0
    for t in range(1, grid.horizon + 1):
        forward_step(state, t)
    return state.psi_fwd


def backward_messages(state: DualState) -> list:
    """Recompute all backward messages under the current duals."""
    grid = state.cost.grid
    T = grid.horizon
    state.psi_bwd[T] = np.ones(grid.joint_size(T))
    state.log_bwd[T] = 0.0
    for t in range(T - 1, -1, -1):
        backward_step(state, t)
    return state.psi_bwd


def marginal_residual(state: DualState, t: int, m: np.ndarray) -> float:
    """Max-norm gap between the model price marginal at t and m."""
    grid = state.cost.grid
    lin, L = state.joint_marginal(t)
    p = sum_over_aux(lin, grid.n_price(t), grid.n_aux(t))
    with np.errstate(over="ignore"):
        return float(np.max(np.abs(p * np.exp(L) - m)))


def update_marginal_dual(state: DualState, cost: StageCost, t: int, m: np.ndarray) -> np.ndarray:
    """Closed-form block solve for u_t; afterwards the marginal at t is m.

    The new u divides m by the price projection of (forward message *
    backward message); a zero projection against positive target mass means
    no feasible path reaches that price and the problem is infeasible. Zero
    target mass on a zero projection leaves u = 1 (the constraint is vacuous
    there); zero target on positive projection gives u = 0, which correctly
    forbids the state.
    """
    grid = cost.grid
    hat, psi = state.psi_fwd[t], state.psi_bwd[t]
    p = sum_over_aux(hat * psi, grid.n_price(t), grid.n_aux(t))
    starved = (m > 0) & (p <= 0)
    if np.any(starved):
        i = int(np.flatnonzero(starved)[0])
        s_val = float(np.asarray(grid.price_support[t])[i])
        raise InfeasibleError(
            f"target mass {m[i]:.3e} at price {s_val!r} (t={t}) is unreachable: "
            "model assigns it zero weight for every dual choice"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(p > 0, m / np.where(p > 0, p, 1.0), 1.0)
    state.set_u(t, u, -(state.log_fwd[t] + state.log_bwd[t]))
    return u


def _lambda_mass_term(state: DualState, t: int, m: np.ndarray) -> float:
    """lambda_t . m_t with the 0 * log(0) convention for zero-mass atoms."""
    pos = m > 0
    with np.errstate(divide="ignore"):
        lam = state.epsilon * (np.log(state.u[t][pos]) + state.u_log[t])
    return float(lam @ m[pos])


def newton_gamma(
    state: DualState,
    cost: StageCost,
    t: int,
    tol: float = 1e-10,
    max_iter: int = 50,
    clamp: float = 700.0,
    clamp_log: Optional[list] = None,
):
    """Solve the martingale block gamma_t (stage t+1) by damped Newton.

    Each joint state's equation is scalar with strictly increasing residual
    alpha (its derivative beta is a positive combination of squares), so the
    blocks decouple. A step is accepted when the state's |alpha| shrank and
    its share of the total mass did not grow; the second condition makes
    every accepted step a dual ascent step, since the stage mass as a
    function of gamma_t(i) is minimized exactly at alpha = 0. gamma is
    clamped per state so its exponent stays within floating range; states
    pinned at the clamp with leftover weighted residual are recorded in
    clamp_log (or warned about).

    States the forward message gives zero weight are skipped: they carry no
    mass, their constraint is vacuous, and their gamma is immaterial.

    Returns (pre-update weighted residual, post-update stage mass in true
    scale, iterations used).
    """
    stage_t = t + 1
    op = cost.stage(stage_t)
    eps = cost.epsilon
    delta = op.delta_data
    row = op.row_index
    kern = op.kernel_data

    w, Lw = state.bwd_weight(stage_t)
    f, Lf = state.fwd_weight(t)
    gamma = state.gamma[t].copy()

    dmax = np.zeros(op.n_from)
    np.maximum.at(dmax, row, np.abs(delta))
    cap = np.where(dmax > 0, clamp * eps / np.where(dmax > 0, dmax, 1.0), np.inf)

    def tables(g):
        e = kern * np.exp(g[row] * delta / eps)
        alpha = op.matrix(e * delta) @ w
        rowmass = op.matrix(e) @ w
        return e, alpha, rowmass

    e, alpha, rowmass = tables(gamma)
    beta = op.matrix(e * delta * delta / eps) @ w

    active = f > 0
    mass_lin = float(f @ rowmass)
    if mass_lin <= 0:
        raise InfeasibleError(f"no mass left on stage {stage_t}: model is empty")
    with np.errstate(over="ignore"):
        scale = float(np.exp(Lf + Lw))
    # the scale factors of f and w cancel in this ratio, so it is the true
    # weighted martingale residual relative to total mass
    pre_residual = float(np.max(f * np.abs(alpha))) / mass_lin

    degenerate = active & (beta <= 0) & (np.abs(alpha) > 0)
    if np.any(degenerate):
        i = int(np.flatnonzero(degenerate)[0])
        s_val, x_val = (arr[i] for arr in cost.grid.state_values(t))
        raise InfeasibleError(
            f"state (s={s_val!r}, x={x_val!r}) at time {t} cannot satisfy the "
            "martingale constraint: its successor prices lie on one side"
        )

    iterations = 0
    for iterations in range(1, max_iter + 1):
        weighted = f * np.abs(alpha)
        tol_lin = tol * float(f @ rowmass)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(beta > 0, alpha / np.where(beta > 0, beta, 1.0), 0.0)
        # a state pinned at its clamp with the step pointing outward cannot
        # improve; leave it to the clamp report instead of looping on it
        pinned_out = ((gamma >= cap) & (step < 0)) | ((gamma <= -cap) & (step > 0))
        pending = active & (weighted > tol_lin) & ~pinned_out
        if not np.any(pending):
            break
        theta = np.ones(op.n_from)
        ok = np.ones(op.n_from, dtype=bool)
        trial = gamma
        for _ in range(40):
            trial = np.clip(gamma - np.where(pending, theta * step, 0.0), -cap, cap)
            _, alpha2, rowmass2 = tables(trial)
            ok = (np.abs(alpha2) <= np.abs(alpha) * (1 + 1e-12)) & (
                rowmass2 <= rowmass * (1 + 1e-12)
            )
            stuck = pending & ~ok
            if not np.any(stuck):
                break
            theta = np.where(stuck, theta / 2.0, theta)
        # a state that cannot improve even at step size 2^-40 is at the
        # precision floor; states are independent, so retire it for this call
        hopeless = pending & ~ok
        active = active & ~hopeless
        gamma = np.where(hopeless, gamma, trial)
        e, alpha, rowmass = tables(gamma)
        beta = op.matrix(e * delta * delta / eps) @ w
    else:
        weighted = f * np.abs(alpha)
        tol_lin = tol * float(f @ rowmass)
        pinned_out = ((gamma >= cap) & (alpha < 0)) | ((gamma <= -cap) & (alpha > 0))
        if np.any(active & (weighted > tol_lin) & ~pinned_out):
            i = int(np.argmax(np.where(active & ~pinned_out, weighted, 0.0)))
            s_val, x_val = (arr[i] for arr in cost.grid.state_values(t))
            raise ConvergenceFailure(
                f"martingale Newton at time {t} did not reach tolerance in "
                f"{max_iter} iterations (worst state s={s_val!r}, x={x_val!r}, "
                f"weighted residual {weighted[i] / mass_lin:.3e})"
            )

    pinned = active & (np.abs(gamma) >= cap * (1 - 1e-12)) & (f * np.abs(alpha) > tol_lin)
    if np.any(pinned):
        i = int(np.flatnonzero(pinned)[0])
        s_val, x_val = (arr[i] for arr in cost.grid.state_values(t))
        note = (
            f"gamma clamped at time {t} for {int(pinned.sum())} state(s), e.g. "
            f"(s={s_val!r}, x={x_val!r}): marginal pair is likely not irreducible"
        )
        if clamp_log is None:
            warnings.warn(note)
        else:
            clamp_log.append(note)

    state.set_gamma(t, gamma)
    mass_true = float(f @ rowmass) * scale
    return pre_residual, mass_true, iterations


def solve(problem: Problem, opts: Optional[SolveOptions] = None, warm: Optional[dict] = None):
    """Run coordinate dual ascent sweeps to the requested tolerances.

    Each sweep walks t = 0..T refreshing forward messages and solving every
    constrained marginal block in closed form, then walks the stages
    backward solving every martingale block by Newton and refreshing
    backward messages. Residuals are recorded before each block's own
    update, and convergence is declared when a sweep's pre-update residuals
    all sit within tolerance, so a warm-started solve can return after one
    sweep without moving anything.

    warm optionally carries {"lambda": {t: vector}, "gamma": [vectors]} in
    price units, e.g. from a previous solve at a different epsilon.

    Returns (DualState, SolveHistory). Raises ConvergenceFailure with the
    history attached when the sweep budget runs out.
    """
    opts = opts or SolveOptions()
    cost = problem.cost
    grid = cost.grid
    T = grid.horizon
    if opts.check_order:
        problem.check_order(strict_irreducibility=opts.strict_irreducibility)

    state = DualState(cost, problem.constrained, opts.gamma_init)
    if warm is not None:
        _apply_warm_start(state, warm)
    history = SolveHistory()

    lam_m = {t: _lambda_mass_term(state, t, problem.weights[t]) for t in state.constrained}
    backward_messages(state)

    for sweep in range(1, opts.max_sweeps + 1):
        marg_res = {}
        mart_res = {}

        state.psi_fwd[0] = np.ones(grid.joint_size(0))
        state.log_fwd[0] = 0.0
        for t in range(T + 1):
            if t > 0:
                forward_step(state, t)
            if t in state.u:
                m = problem.weights[t]
                marg_res[t] = marginal_residual(state, t, m)
                update_marginal_dual(state, cost, t, m)
                lam_m[t] = _lambda_mass_term(state, t, m)
                if opts.track_dual:
                    history.dual_trace.append(sum(lam_m.values()) - cost.epsilon * float(m.sum()))

        state.psi_bwd[T] = np.ones(grid.joint_size(T))
        state.log_bwd[T] = 0.0
        dual_now = history.dual_trace[-1] if history.dual_trace else np.nan
        for t in range(T - 1, -1, -1):
            pre_res, mass_true, _ = newton_gamma(
                state,
                cost,
                t,
                tol=opts.newton_tol,
                max_iter=opts.newton_max_iter,
                clamp=opts.gamma_clamp,
                clamp_log=history.clamped_states,
            )
            mart_res[t] = pre_res
            dual_now = sum(lam_m.values()) - cost.epsilon * mass_true
            if opts.track_dual:
                history.dual_trace.append(dual_now)
            backward_step(state, t)

        history.reports.append(ResidualReport(sweep, marg_res, mart_res, dual_now))
        if opts.progress is not None:
            opts.progress(history.reports[-1])
        if (
            max(marg_res.values(), default=0.0) <= opts.marginal_tol
            and max(mart_res.values(), default=0.0) <= opts.martingale_tol
        ):
            history.converged = True
            break

    if history.clamped_states:
        warnings.warn(history.clamped_states[0] + f" ({len(history.clamped_states)} sweeps affected)")
    if not history.converged:
        last = history.reports[-1]
        raise ConvergenceFailure(
            f"no convergence in {opts.max_sweeps} sweeps "
            f"(marginal residual {last.worst_marginal:.3e}, "
            f"martingale residual {last.worst_martingale:.3e})",
            report=history,
        )
    return state, history


def dual_objective(state: DualState, problem: Problem) -> float:
    """Dual value under the current duals, with fresh messages."""
    forward_messages(state)
    backward_messages(state)
    lam = sum(_lambda_mass_term(state, t, problem.weights[t]) for t in state.constrained)
    return lam - state.epsilon * state.mass()


def _apply_warm_start(state: DualState, warm: dict):
    eps = state.epsilon
    for t, lam in warm.get("lambda", {}).items():
        lam = np.asarray(lam, dtype=float)
        if lam.shape != state.u[t].shape:
            raise ProblemError(f"warm-start lambda at t={t} has wrong length")
        hi = float(np.max(lam[np.isfinite(lam)], initial=0.0))
        with np.errstate(over="ignore"):
            state.set_u(t, np.exp((lam - hi) / eps), hi / eps)
    gammas = warm.get("gamma")
    if gammas is not None:
        for t, g in enumerate(gammas):
            g = np.asarray(g, dtype=float)
            if g.shape != state.gamma[t].shape:
                raise ProblemError(f"warm-start gamma at t={t} has wrong length")
            state.set_gamma(t, g)


def solve_with_schedule(
    problem: Problem,
    epsilons: Sequence[float],
    opts: Optional[SolveOptions] = None,
    warm: Optional[dict] = None,
):
    """Continuation in epsilon: solve at each value, warm-starting the next.

    lambda and gamma are in price units, so they transfer across epsilon
    unchanged; only the kernels are rebuilt. An initial warm start seeds the
    first stage the same way. Returns the final problem, state and history
    (at the last epsilon).
    """
    if not len(epsilons):
        raise ProblemError("epsilon schedule must be nonempty")
    opts = opts or SolveOptions()
    state = history = None
    current = problem
    for k, eps in enumerate(epsilons):
        current = Problem(problem.cost.with_epsilon(float(eps)), problem.marginals)
        stage_opts = opts
        if k > 0:
            # order checks are pure marginal facts; checking once is enough
            stage_opts = SolveOptions(**{**opts.__dict__, "check_order": False})
        state, history = solve(current, stage_opts, warm=warm)
        warm = {
            "lambda": {t: state.lambda_at(t) for t in state.constrained},
            "gamma": [g.copy() for g in state.gamma],
        }
    return current, state, history
