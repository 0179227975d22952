"""Brute-force references for micro problems: dense tensors and an exact LP.

Everything here trades scalability for transparency. The path law is held
as a full (T+1)-way array, projections are literal sums, the dual blocks
are solved against dense projections with scalar bracketed root finding,
and the unregularized value comes from a plain LP over feasible paths.
None of it shares code with the structured solver beyond the problem
containers, which is the point: agreement between the two is evidence, not
tautology.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq, linprog
import scipy.sparse as sp

from .cost import StageCost
from .errors import ConvergenceFailure, InfeasibleError, ProblemError
from .solver import Problem, SolveOptions
from .state_space import delta_matrix

DENSE_CAP = 10**6
LP_CAP = 10**4


@dataclass
class DenseTensor:
    """Full path-indexed array over joint states, one axis per time."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.size > DENSE_CAP:
            raise ProblemError(
                f"dense tensor with {self.values.size} entries exceeds the cap {DENSE_CAP}"
            )

    @property
    def shape(self):
        return self.values.shape


def _axis_shape(ndim: int, axes, dims) -> tuple:
    shape = [1] * ndim
    for ax, d in zip(axes, dims):
        shape[ax] = d
    return tuple(shape)


def kernel_tensor(cost: StageCost) -> DenseTensor:
    """Product of stage kernels over all transitions of each path."""
    grid = cost.grid
    dims = [grid.joint_size(t) for t in range(grid.horizon + 1)]
    if int(np.prod(dims)) > DENSE_CAP:
        raise ProblemError(f"state space {dims} exceeds the dense cap {DENSE_CAP}")
    out = np.ones(dims)
    for t in range(1, grid.horizon + 1):
        k = cost.stage(t).kernel_dense()
        out = out * k.reshape(_axis_shape(len(dims), (t - 1, t), k.shape))
    return DenseTensor(out)


def payoff_tensor(cost: StageCost) -> DenseTensor:
    """Sum of stage payoffs along each path (meaningful on feasible paths)."""
    grid = cost.grid
    dims = [grid.joint_size(t) for t in range(grid.horizon + 1)]
    if int(np.prod(dims)) > DENSE_CAP:
        raise ProblemError(f"state space {dims} exceeds the dense cap {DENSE_CAP}")
    out = np.zeros(dims)
    for t in range(1, grid.horizon + 1):
        p = cost.stage(t).phi_dense()
        out = out + p.reshape(_axis_shape(len(dims), (t - 1, t), p.shape))
    return DenseTensor(out)


def dense_projection(tensor: DenseTensor, dims):
    """Sum over every axis not listed; dims is one or two time indices."""
    dims = tuple(int(d) for d in np.atleast_1d(dims))
    if not 1 <= len(dims) <= 2:
        raise ProblemError("dense_projection takes one or two time indices")
    keep = set(dims)
    axes = tuple(ax for ax in range(tensor.values.ndim) if ax not in keep)
    out = tensor.values.sum(axis=axes)
    if len(dims) == 2 and dims[0] > dims[1]:
        out = out.T
    return out


def apply_duals(kernel: DenseTensor, cost: StageCost, u: dict, gamma: Sequence[np.ndarray]) -> DenseTensor:
    """Model tensor K * (u factors) * (martingale factors), true scale.

    u maps constrained times to price-level vectors (true scale); gamma has
    one joint-state vector per stage start 0..T-1.
    """
    grid = cost.grid
    ndim = grid.horizon + 1
    q = kernel.values.copy()
    for t, ut in u.items():
        joint = np.tile(np.asarray(ut, dtype=float), grid.n_aux(t))
        q = q * joint.reshape(_axis_shape(ndim, (t,), (joint.size,)))
    for t in range(1, grid.horizon + 1):
        g = np.exp(
            np.asarray(gamma[t - 1], dtype=float)[:, None]
            * delta_matrix(grid, t)
            / cost.epsilon
        )
        q = q * g.reshape(_axis_shape(ndim, (t - 1, t), g.shape))
    return DenseTensor(q)


@dataclass
class DenseSolveResult:
    tensor: DenseTensor
    dual_objective: float
    price: float
    u: dict
    gamma: list
    sweeps: int
    marginal_res: dict
    martingale_res: dict


def dense_regularized_solve(problem: Problem, opts: Optional[SolveOptions] = None) -> DenseSolveResult:
    """Coordinate dual ascent with every projection taken on the full tensor.

    Each marginal block rebuilds the tensor without its own u factor and
    divides the target weights by the resulting projection, which keeps the
    zero-mass conventions exact. Each martingale block solves its states'
    scalar equations by bracketed root finding on the pair-projection rows;
    rows are independent because a state's own factor is the only one of
    that block appearing in its row.
    """
    opts = opts or SolveOptions()
    cost = problem.cost
    grid = cost.grid
    eps = cost.epsilon
    T = grid.horizon
    ndim = T + 1

    kern = kernel_tensor(cost)
    u = {t: np.ones(grid.n_price(t)) for t in problem.constrained}
    gamma = [np.zeros(grid.joint_size(t)) for t in range(T)]
    q = kern.values.copy()

    deltas = [delta_matrix(grid, t) for t in range(1, T + 1)]
    caps = []
    for d in deltas:
        dmax = np.abs(d).max(axis=1)
        caps.append(np.where(dmax > 0, opts.gamma_clamp * eps / np.where(dmax > 0, dmax, 1.0), np.inf))

    converged = False
    sweep = 0
    marg_res = {}
    mart_res = {}
    for sweep in range(1, opts.max_sweeps + 1):
        marg_res = {}
        mart_res = {}
        for t in problem.constrained:
            m = problem.weights[t]
            others = {s: u[s] for s in u if s != t}
            bare_joint = dense_projection(apply_duals(kern, cost, others, gamma), (t,))
            bare = bare_joint.reshape(grid.n_aux(t), grid.n_price(t)).sum(axis=0)
            marg_res[t] = float(np.max(np.abs(u[t] * bare - m)))
            starved = (m > 0) & (bare <= 0)
            if np.any(starved):
                i = int(np.flatnonzero(starved)[0])
                raise InfeasibleError(
                    f"target mass at price index {i} (t={t}) is unreachable in the dense model"
                )
            u[t] = np.where(bare > 0, m / np.where(bare > 0, bare, 1.0), 1.0)
            q = apply_duals(kern, cost, u, gamma).values

        mass = float(q.sum())
        for t in range(T, 0, -1):
            axes = tuple(ax for ax in range(ndim) if ax not in (t - 1, t))
            pair = q.sum(axis=axes)
            d = deltas[t - 1]
            mart_res[t - 1] = float(np.max(np.abs((pair * d).sum(axis=1)))) / mass
            pre = int(np.prod(q.shape[: t - 1], dtype=np.int64))
            rest = int(np.prod(q.shape[t + 1 :], dtype=np.int64))
            view = q.reshape(pre, q.shape[t - 1], q.shape[t], rest)
            for k in range(pair.shape[0]):
                row = pair[k]
                if not np.any(row > 0):
                    continue
                drow = d[k]
                if np.all(drow[row > 0] == 0.0):
                    continue
                bare_row = row * np.exp(-gamma[t - 1][k] * drow / eps)

                def g(z):
                    return float((bare_row * np.exp(z * drow / eps) * drow).sum())

                cap = caps[t - 1][k]
                if g(-cap) >= 0:
                    z = -cap
                elif g(cap) <= 0:
                    z = cap
                else:
                    z = brentq(g, -cap, cap, xtol=1e-14, maxiter=200)
                change = z - gamma[t - 1][k]
                if change != 0.0:
                    view[:, k, :, :] *= np.exp(change * drow / eps)[None, :, None]
                    gamma[t - 1][k] = z
            mass = float(q.sum())

        if (
            max(marg_res.values(), default=0.0) <= opts.marginal_tol
            and max(mart_res.values(), default=0.0) <= opts.martingale_tol
        ):
            converged = True
            break

    if not converged:
        raise ConvergenceFailure(
            f"dense solve did not converge in {opts.max_sweeps} sweeps "
            f"(marginal {max(marg_res.values(), default=0):.3e}, "
            f"martingale {max(mart_res.values(), default=0):.3e})"
        )

    tensor = apply_duals(kern, cost, u, gamma)
    mass = float(tensor.values.sum())
    lam_sum = 0.0
    for t in problem.constrained:
        m = problem.weights[t]
        pos = m > 0
        lam_sum += float((eps * np.log(u[t][pos])) @ m[pos])
    value = lam_sum - eps * mass
    phi = payoff_tensor(cost)
    return DenseSolveResult(
        tensor=tensor,
        dual_objective=value,
        price=float((phi.values * tensor.values).sum()),
        u=u,
        gamma=gamma,
        sweeps=sweep,
        marginal_res=marg_res,
        martingale_res=mart_res,
    )


def entropy_term(tensor: DenseTensor) -> float:
    """Sum of q log q - q over positive entries (zeros contribute 0)."""
    q = tensor.values
    pos = q > 0
    return float((q[pos] * np.log(q[pos]) - q[pos]).sum())


def regularized_objective(cost: StageCost, tensor: DenseTensor) -> float:
    """Primal value <C, Q> + eps * D(Q) with the direction sign applied."""
    phi = payoff_tensor(cost)
    return cost.sign * float((phi.values * tensor.values).sum()) + cost.epsilon * entropy_term(tensor)


def _enumerate_paths(cost: StageCost):
    """All feasible paths as joint-index columns, with payoff and transitions."""
    grid = cost.grid
    T = grid.horizon
    starts = np.flatnonzero(cost.reachable[0])
    paths = starts[:, None]
    payoff = np.zeros(starts.size)
    transitions = []  # per stage: nonzero position of each path's transition
    for t in range(1, T + 1):
        op = cost.stage(t)
        ends = paths[:, -1]
        counts = op.indptr[ends + 1] - op.indptr[ends]
        if int(counts.sum()) > LP_CAP:
            raise ProblemError(
                f"feasible path count exceeds the LP cap {LP_CAP} at time {t}"
            )
        rep = np.repeat(np.arange(paths.shape[0]), counts)
        pos = np.concatenate(
            [np.arange(op.indptr[e], op.indptr[e + 1]) for e in ends]
        ) if paths.shape[0] else np.zeros(0, dtype=int)
        transitions = [tr[rep] for tr in transitions]
        transitions.append(pos)
        paths = np.hstack([paths[rep], op.indices[pos][:, None]])
        payoff = payoff[rep] + op.phi_data[pos]
    if paths.shape[0] == 0:
        raise InfeasibleError("no feasible path survives the stage masks")
    return paths, payoff, transitions


def lp_value_small(problem: Problem) -> float:
    """Exact value of the unregularized problem by linear programming.

    Variables are the feasible paths; equality constraints pin the price
    marginals at constrained times and zero conditional price drift at
    every (time, joint state). Infeasibility here means the constraints
    genuinely admit no martingale (the convex-order check should have
    caught it) and raises with the LP diagnostics.
    """
    cost = problem.cost
    grid = cost.grid
    T = grid.horizon
    sizes = [grid.joint_size(t) for t in range(T + 1)]
    if int(np.prod(sizes)) > LP_CAP:
        raise ProblemError(f"state space {sizes} exceeds the LP cap {LP_CAP}")

    paths, payoff, transitions = _enumerate_paths(cost)
    n = paths.shape[0]

    rows, cols, vals, rhs = [], [], [], []
    row_count = 0
    for t in problem.constrained:
        price_idx = paths[:, t] % grid.n_price(t)
        m = problem.weights[t]
        for i in range(grid.n_price(t)):
            members = np.flatnonzero(price_idx == i)
            rows.extend([row_count] * members.size)
            cols.extend(members.tolist())
            vals.extend([1.0] * members.size)
            rhs.append(m[i])
            row_count += 1

    for t in range(1, T + 1):
        op = cost.stage(t)
        pos = transitions[t - 1]
        delta = op.delta_data[pos]
        key = paths[:, t - 1]
        for k in np.unique(key):
            members = np.flatnonzero(key == k)
            nz = members[delta[members] != 0.0]
            if nz.size == 0:
                continue
            rows.extend([row_count] * nz.size)
            cols.extend(nz.tolist())
            vals.extend(delta[nz].tolist())
            rhs.append(0.0)
            row_count += 1

    a_eq = sp.coo_matrix((vals, (rows, cols)), shape=(row_count, n)).tocsr()
    res = linprog(
        cost.sign * payoff,
        A_eq=a_eq,
        b_eq=np.asarray(rhs),
        bounds=(0, None),
        method="highs",
    )
    if res.status == 2:
        raise InfeasibleError(f"path LP infeasible: {res.message}")
    if res.status != 0:
        raise ProblemError(f"path LP failed (status {res.status}): {res.message}")
    return cost.sign * float(res.fun)
