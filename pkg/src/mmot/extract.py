"""Read results out of a converged dual state without the full path tensor.

Everything interpretable about the solution is a one-time marginal or an
adjacent-pair coupling, and both come straight from the messages: the
marginal at t is (forward message * u factor * backward message), and the
coupling of the step t-1 -> t sandwiches the stage kernel between the
forward weight on the left and the backward weight on the right. Anything
beyond that (three-way laws, distant pairs) would rebuild a tensor whose
avoidance is the point of the method, so those requests are refused and the
dense oracle is the suggested path for problems small enough to afford it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import ProblemError
from .solver import (
    DualState,
    Problem,
    SolveHistory,
    backward_messages,
    forward_messages,
)
from .state_space import sum_over_aux, sum_over_price


def refresh_messages(state: DualState):
    """Bring both message families in line with the current duals.

    A finished sweep leaves forward messages one gamma-update behind, so
    extraction always refreshes first; the cost is two passes.
    """
    forward_messages(state)
    backward_messages(state)


@dataclass
class MarginalView:
    """Law of the joint state at one time, with its two condensations."""

    t: int
    joint: np.ndarray
    price: np.ndarray
    aux: np.ndarray


def solution_marginal(state: DualState, t: int, refresh: bool = True) -> MarginalView:
    """Marginal of the solution at t in true scale, summing to total mass."""
    if refresh:
        refresh_messages(state)
    grid = state.cost.grid
    lin, L = state.joint_marginal(t)
    joint = lin * np.exp(L)
    return MarginalView(
        t=t,
        joint=joint,
        price=sum_over_aux(joint, grid.n_price(t), grid.n_aux(t)),
        aux=sum_over_price(joint, grid.n_price(t), grid.n_aux(t)),
    )


def pairwise_coupling(state: DualState, t: int, refresh: bool = True) -> sp.csr_matrix:
    """Joint law of the states at t-1 and t, as a sparse matrix in true scale.

    Left weight is the forward message at t-1 (times its u factor when t-1
    is constrained), right weight the backward message at t likewise; the
    log scales of both sides are reapplied so entries are genuine
    probabilities.
    """
    if refresh:
        refresh_messages(state)
    op = state.cost.stage(t)
    left, Ll = state.fwd_weight(t - 1)
    right, Lr = state.bwd_weight(t)
    data = state.kg_data(t) * left[op.row_index] * right[op.indices]
    with np.errstate(over="ignore"):
        data = data * np.exp(Ll + Lr)
    return op.matrix(data)


def projection(state: DualState, dims, refresh: bool = True):
    """One-time or adjacent-pair projection of the solution.

    Any other projection would materialize part of the path tensor this
    solver exists to avoid; for micro problems use oracle.dense_projection
    on a densely rebuilt tensor instead.
    """
    dims = tuple(int(d) for d in np.atleast_1d(dims))
    if len(dims) == 1:
        return solution_marginal(state, dims[0], refresh=refresh).joint
    if len(dims) == 2 and dims[1] == dims[0] + 1:
        return pairwise_coupling(state, dims[1], refresh=refresh)
    raise ProblemError(
        f"projection onto times {dims} is not materialized: only single times "
        "and adjacent pairs are; for micro instances use oracle.dense_projection"
    )


def price(state: DualState, refresh: bool = True) -> float:
    """Expected payoff under the solution: sum of stage payoffs against couplings.

    phi always stores the true payoff (the upper-bound sign convention lives
    in the kernels alone), so this is the price of the problem as posed for
    both directions.
    """
    if refresh:
        refresh_messages(state)
    total = 0.0
    for t in range(1, state.cost.grid.horizon + 1):
        coup = pairwise_coupling(state, t, refresh=False)
        total += float(coup.data @ state.cost.stage(t).phi_data)
    return total


def export_hedge(state: DualState) -> dict:
    """Dual variables as hedge ingredients, labeled for what they are.

    lambda_t / epsilon log-prices the static option position at each
    constrained time; gamma_t is the dynamic position in the underlying per
    joint state. These are approximate, regularized quantities: the values
    converge, the variables themselves carry no accuracy guarantee.
    """
    return {
        "kind": "approximate regularized subhedge",
        "epsilon": state.epsilon,
        "lambda": {t: state.lambda_at(t) for t in state.constrained},
        "gamma": [g.copy() for g in state.gamma],
    }


@dataclass
class Solution:
    """Everything extracted from one converged solve."""

    price: float
    pair_couplings: list
    marginals: list
    dual_report: dict
    history: SolveHistory

    @property
    def final_residuals(self):
        return self.history.reports[-1]


def extract_solution(state: DualState, problem: Problem, history: SolveHistory) -> Solution:
    refresh_messages(state)
    grid = state.cost.grid
    couplings = [pairwise_coupling(state, t, refresh=False) for t in range(1, grid.horizon + 1)]
    marginals = [solution_marginal(state, t, refresh=False) for t in range(grid.horizon + 1)]
    value = sum(
        float(c.data @ state.cost.stage(t).phi_data) for t, c in enumerate(couplings, start=1)
    )
    return Solution(
        price=value,
        pair_couplings=couplings,
        marginals=marginals,
        dual_report=export_hedge(state),
        history=history,
    )


# -- file output ---------------------------------------------------------
#
# All writers format floats with repr (shortest round-trip form) and walk
# arrays in index order, so identical solutions produce byte-identical
# files.


def _fmt(v) -> str:
    v = float(v)
    if v == float("inf"):
        return "inf"
    if v == float("-inf"):
        return "-inf"
    return repr(v)


def write_couplings_csv(path, solution: Solution, grid) -> None:
    """Adjacent-pair couplings as sparse triplets with decoded states.

    Indices are 1-based joint indices (price varies fastest); only entries
    carrying mass appear.
    """
    with open(path, "w") as fh:
        fh.write("t,i_from,i_to,mass,s_from,x_from,s_to,x_to\n")
        for t, coup in enumerate(solution.pair_couplings, start=1):
            s_prev, x_prev = grid.state_values(t - 1)
            s_now, x_now = grid.state_values(t)
            coo = coup.tocoo()
            for i, j, v in zip(coo.row, coo.col, coo.data):
                if v <= 0:
                    continue
                fh.write(
                    f"{t},{i + 1},{j + 1},{_fmt(v)},"
                    f"{_fmt(s_prev[i])},{_fmt(x_prev[i])},{_fmt(s_now[j])},{_fmt(x_now[j])}\n"
                )


def write_marginals_csv(path, solution: Solution, grid) -> None:
    """Joint-state marginals at every time as (t, s, x, mass) rows."""
    with open(path, "w") as fh:
        fh.write("t,s,x,mass\n")
        for view in solution.marginals:
            s_vals, x_vals = grid.state_values(view.t)
            for s, x, v in zip(s_vals, x_vals, view.joint):
                fh.write(f"{view.t},{_fmt(s)},{_fmt(x)},{_fmt(v)}\n")


def write_residuals_csv(path, history: SolveHistory) -> None:
    with open(path, "w") as fh:
        fh.write("iter,t,kind,residual\n")
        for it, t, kind, res in history.residual_rows():
            fh.write(f"{it},{t},{kind},{_fmt(res)}\n")


def write_duals(prefix, state: DualState) -> None:
    """Dual variables as CSVs (lambda, gamma) plus an npz for re-seeding."""
    with open(f"{prefix}lambda.csv", "w") as fh:
        fh.write("t,s,lambda\n")
        for t in state.constrained:
            support = np.asarray(state.cost.grid.price_support[t], dtype=float)
            lam = state.lambda_at(t)
            for s, v in zip(support, lam):
                fh.write(f"{t},{_fmt(s)},{_fmt(v)}\n")
    with open(f"{prefix}gamma.csv", "w") as fh:
        fh.write("t,s,x,gamma\n")
        for t in range(state.cost.grid.horizon):
            s_vals, x_vals = state.cost.grid.state_values(t)
            for s, x, v in zip(s_vals, x_vals, state.gamma[t]):
                fh.write(f"{t},{_fmt(s)},{_fmt(x)},{_fmt(v)}\n")
    payload = {f"lambda_{t}": state.lambda_at(t) for t in state.constrained}
    payload.update({f"gamma_{t}": state.gamma[t] for t in range(state.cost.grid.horizon)})
    np.savez(f"{prefix}duals.npz", **payload)


def summary_dict(solution: Solution, problem: Problem, wall_time_s: float) -> dict:
    rep = solution.final_residuals
    return {
        "price": solution.price,
        "epsilon": problem.cost.epsilon,
        "direction": problem.cost.direction,
        "T": problem.cost.grid.horizon,
        "constrained_times": list(problem.constrained),
        "sweeps": solution.history.sweeps,
        "marginal_res_max": rep.worst_marginal,
        "martingale_res_max": rep.worst_martingale,
        "wall_time_s": wall_time_s,
    }


def write_summary_json(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
