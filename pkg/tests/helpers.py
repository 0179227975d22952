"""Shared builders for the test suite.

The random-instance generators construct problems that are feasible by
construction: marginal chains come from explicit martingale kernels on a
common lattice, so convex order and reachability never have to be assumed.
The direct payoff evaluators recompute each product's payoff from the raw
price path, independently of the stage decomposition they are used to
check.
"""

from __future__ import annotations

import numpy as np

from mmot import (
    DiscreteMarginal,
    Problem,
    StateGrid,
    assemble_stage_costs,
    build_aux_grids,
    build_price_grids,
    payoff_library,
)
from mmot.cost import StagePayoff


def lattice_chain(rng, T, n_points, spread_prob=0.7):
    """Random martingale marginal chain on one shared lattice.

    Starts from a random distribution and pushes it through random
    mean-preserving kernels: each atom either stays or splits onto a
    random (left, right) pair around it. Returns (grid, [mu_0 .. mu_T])
    with every mu_t a DiscreteMarginal on the lattice.
    """
    grid = np.sort(rng.uniform(0.0, 1.0, size=n_points))
    while np.unique(grid).size < n_points:
        grid = np.sort(rng.uniform(0.0, 1.0, size=n_points))
    w = rng.dirichlet(np.ones(n_points) * 2.0)
    out = [DiscreteMarginal(grid, w)]
    for _ in range(T):
        nxt = np.zeros(n_points)
        for i in range(n_points):
            if w[i] == 0:
                continue
            can_split = 0 < i < n_points - 1
            if can_split and rng.uniform() < spread_prob:
                lo = rng.integers(0, i)
                hi = rng.integers(i + 1, n_points)
                a = (grid[hi] - grid[i]) / (grid[hi] - grid[lo])
                nxt[lo] += w[i] * a
                nxt[hi] += w[i] * (1 - a)
            else:
                nxt[i] += w[i]
        w = nxt
        out.append(DiscreteMarginal(grid, w / w.sum()))
    return grid, out


def random_micro_problem(rng, epsilon=0.3):
    """Feasible random micro instance within the oracle caps.

    T in {2,3,4}, price grids of at most 5 points (3 when the feature is a
    running maximum so the feature grids stay small), feature grids of at
    most 3 points, random constrained subset, and a random quadratic-ish
    stage payoff.
    """
    T = int(rng.integers(2, 5))
    kind = ("none", "indicator_chain", "max")[int(rng.integers(0, 3))]
    n_points = int(rng.integers(2, 4 if kind == "max" else 6))
    grid, chain = lattice_chain(rng, T, n_points)

    if kind == "indicator_chain":
        barrier = float(rng.uniform(grid[0], grid[-1]))
        recursion_params = {"barrier": barrier}
    else:
        recursion_params = {}
    from mmot import AuxRecursion

    recursion = AuxRecursion(kind, recursion_params)

    a, b, c = rng.uniform(-1.0, 1.0, size=3)

    def stage_fn(s_prev, x_prev, s_now, x_now):
        return a * s_now**2 + b * np.abs(s_now - s_prev) + c * x_now

    payoffs = [StagePayoff("custom", {"stages": {t: stage_fn for t in range(1, T + 1)}})]

    price_grids = build_price_grids([{"points": grid} for _ in range(T + 1)])
    aux_grids = build_aux_grids(price_grids, recursion)
    state_grid = StateGrid(price_grids, aux_grids)
    direction = ("lower", "upper")[int(rng.integers(0, 2))]
    cost = assemble_stage_costs(state_grid, recursion, payoffs, epsilon, direction)

    n_constrained = int(rng.integers(1, T + 2))
    times = sorted(rng.choice(np.arange(T + 1), size=n_constrained, replace=False).tolist())
    marginals = {int(t): chain[int(t)] for t in times}
    return Problem(cost, marginals)


def random_duals(rng, cost, constrained):
    """Arbitrary positive scalings and bounded martingale duals."""
    grid = cost.grid
    u = {t: rng.uniform(0.5, 2.0, size=grid.n_price(t)) for t in constrained}
    gamma = [rng.uniform(-0.2, 0.2, size=grid.joint_size(t)) for t in range(grid.horizon)]
    return u, gamma


def product_problem(
    price_entries,
    product,
    params,
    marginals,
    epsilon,
    direction="lower",
    snap_tolerance=None,
):
    """Assemble a Problem for a library product on explicit grids."""
    import dataclasses

    recursion, payoffs = payoff_library(product, params)
    if snap_tolerance is not None:
        recursion = dataclasses.replace(recursion, snap_tolerance=snap_tolerance)
    price_grids = build_price_grids(price_entries)
    aux_grids = build_aux_grids(price_grids, recursion)
    grid = StateGrid(price_grids, aux_grids)
    cost = assemble_stage_costs(grid, recursion, payoffs, epsilon, direction)
    return Problem(cost, marginals)


def _in_set(recursion_params, t, s):
    if "barrier" in recursion_params:
        return s >= recursion_params["barrier"]
    sets = recursion_params["sets"]
    lo, hi = sets if np.ndim(sets[0]) == 0 else sets[t]
    return lo <= s <= hi


def direct_payoff(product, params, prices):
    """Payoff of one product on one raw price path, from first principles."""
    s = [float(v) for v in prices]
    T = len(s) - 1
    if product == "max_of_max":
        return max(s)
    if product == "floating_lookback_put":
        return max(s) - s[T]
    if product == "up_and_in_call":
        hit = max(s) >= params["barrier"]
        return max(s[T] - params["strike"], 0.0) if hit else 0.0
    if product == "asian_straddle":
        return abs(np.mean(s) - params["strike"])
    if product == "average_price_call":
        return max(np.mean(s) - params["strike"], 0.0)
    if product == "digital":
        return 1.0 if max(s) >= params["barrier"] else 0.0
    if product == "variance_swap":
        total = sum(np.log(s[t] / s[t - 1]) ** 2 for t in range(1, T + 1))
        return total - params.get("strike_variance", 0.0)
    if product == "parisian_put":
        count = sum(1 for t in range(T + 1) if _in_set(params, t, s[t]))
        active = count >= params["window"]
        return max(params["strike"] - s[T], 0.0) if active else 0.0
    if product == "forward_start_call":
        k = params.get("moneyness", 1.0)
        return max(s[T] - k * s[params["memory_time"]], 0.0)
    if product == "cliquet":
        cap = params["local_cap"]
        floor = params.get("local_floor", 0.0)
        total = sum(
            min(max((s[t] - s[t - 1]) / s[t - 1], floor), cap) for t in range(1, T + 1)
        )
        return max(total, params.get("global_floor", 0.0))
    raise ValueError(f"no direct evaluator for {product!r}")


def stage_payoff_along_path(cost, price_indices):
    """Sum the assembled stage payoffs along one price path.

    Walks the feasible transitions that realize the given price-index path
    (starting from the unique feasible time-0 state) and accumulates
    phi_data. Returns None if the path leaves the feasible set.
    """
    grid = cost.grid
    state = None
    for idx in np.flatnonzero(cost.reachable[0]):
        if idx % grid.n_price(0) == price_indices[0]:
            state = int(idx)
            break
    if state is None:
        return None
    total = 0.0
    for t in range(1, len(price_indices)):
        op = cost.stage(t)
        row = slice(op.indptr[state], op.indptr[state + 1])
        cols = op.indices[row]
        want = cols % grid.n_price(t) == price_indices[t]
        hits = np.flatnonzero(want)
        if hits.size == 0:
            return None
        entry = op.indptr[state] + int(hits[0])
        total += float(cost.stage(t).phi_data[entry])
        state = int(op.indices[entry])
    return total
