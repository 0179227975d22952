"""Sweep solver: block updates, dual ascent, convergence and failure modes."""

import numpy as np
import pytest

from mmot import (
    AuxRecursion,
    ConvergenceFailure,
    DualState,
    InfeasibleError,
    Problem,
    SolveOptions,
    StagePayoff,
    StateGrid,
    assemble_stage_costs,
    build_aux_grids,
    build_price_grids,
    dual_objective,
    make_marginal,
    solve,
    solve_with_schedule,
)
from mmot.oracle import apply_duals, dense_projection, kernel_tensor
from mmot.solver import (
    backward_messages,
    forward_messages,
    marginal_residual,
    newton_gamma,
    update_marginal_dual,
)
from tests.helpers import random_micro_problem
from tests.test_oracle import convex_mean_problem, digital_micro


def flat_cost(entries, epsilon=1.0, direction="lower"):
    """Zero payoff on explicit grids: every kernel entry is exactly 1."""
    rec = AuxRecursion("none")
    pay = StagePayoff("custom", {"stages": {}})
    grids = build_price_grids(entries)
    grid = StateGrid(grids, build_aux_grids(grids, rec))
    return assemble_stage_costs(grid, rec, [pay], epsilon, direction)


class TestMarginalBlock:
    def test_update_divides_target_by_projection(self):
        cost = flat_cost([{"points": [0.5]}, {"points": [0.0, 1.0]}])
        state = DualState(cost, [1])
        forward_messages(state)
        backward_messages(state)
        m = np.array([0.25, 0.75])
        update_marginal_dual(state, cost, 1, m)
        bare = dense_projection(kernel_tensor(cost), (1,))
        assert np.allclose(state.u_true(1), m / bare)

    def test_own_residual_vanishes_after_update(self):
        problem = digital_micro()
        state = DualState(problem.cost, problem.constrained)
        forward_messages(state)
        backward_messages(state)
        for t in problem.constrained:
            assert marginal_residual(state, t, problem.weights[t]) > 1e-3
            update_marginal_dual(state, problem.cost, t, problem.weights[t])
            assert marginal_residual(state, t, problem.weights[t]) <= 1e-13

    def test_starved_target_is_infeasible(self):
        # zero model weight against positive target mass has no finite dual
        cost = flat_cost([{"points": [0.5]}, {"points": [0.0, 1.0]}])
        state = DualState(cost, [1])
        forward_messages(state)
        backward_messages(state)
        state.psi_bwd[1] = np.array([1.0, 0.0])  # kill the upper price by hand
        with pytest.raises(InfeasibleError, match="unreachable"):
            update_marginal_dual(state, cost, 1, np.array([0.25, 0.75]))

    def test_zero_target_on_live_state_forbids_it(self):
        cost = flat_cost([{"points": [0.5]}, {"points": [0.0, 1.0]}])
        state = DualState(cost, [1])
        forward_messages(state)
        backward_messages(state)
        update_marginal_dual(state, cost, 1, np.array([1.0, 0.0]))
        assert state.u_true(1)[1] == 0.0


class TestMartingaleBlock:
    def test_newton_matches_closed_form(self):
        # increments (-1, +2) with unit kernel weights: the drift vanishes at
        # exp(3 g / eps) = 1/2
        eps = 0.7
        cost = flat_cost([{"points": [1.0]}, {"points": [0.0, 3.0]}], epsilon=eps)
        state = DualState(cost, [1])
        forward_messages(state)
        backward_messages(state)
        newton_gamma(state, cost, 0)
        assert state.gamma[0][0] == pytest.approx(-eps * np.log(2.0) / 3.0, abs=1e-9)

    def test_accepted_steps_zero_the_drift(self):
        rng = np.random.default_rng(3)
        problem = random_micro_problem(rng)
        cost = problem.cost
        state = DualState(cost, problem.constrained)
        forward_messages(state)
        backward_messages(state)
        t = cost.grid.horizon - 1
        newton_gamma(state, cost, t)
        op = cost.stage(t + 1)
        e = op.kernel_data * np.exp(state.gamma[t][op.row_index] * op.delta_data / cost.epsilon)
        w, _ = state.bwd_weight(t + 1)
        drift = op.matrix(e * op.delta_data) @ w
        mass = op.matrix(e) @ w
        f, _ = state.fwd_weight(t)
        assert np.max(f * np.abs(drift)) <= 1e-9 * float(f @ mass)

    def test_one_sided_state_runs_into_the_clamp(self):
        # from price 1.0 both successors lie above: the drift can only be
        # damped exponentially, so gamma walks to its clamp and is reported
        cost = flat_cost([{"points": [1.0]}, {"points": [2.0, 3.0]}])
        state = DualState(cost, [1])
        forward_messages(state)
        backward_messages(state)
        with pytest.raises(ConvergenceFailure):
            newton_gamma(state, cost, 0)  # default budget ends mid-walk
        state = DualState(cost, [1])
        forward_messages(state)
        backward_messages(state)
        with pytest.warns(UserWarning, match="clamped"):
            newton_gamma(state, cost, 0, max_iter=600)
        assert state.gamma[0][0] == pytest.approx(-350.0)  # 700 * eps / max step


class TestSolve:
    def test_digital_micro_full_agreement_with_dense(self):
        problem = digital_micro(epsilon=0.2)
        state, history = solve(problem)
        assert history.converged
        # rebuild the full tensor from the returned duals and compare the
        # message-passing marginals against literal dense projections
        kern = kernel_tensor(problem.cost)
        u = {t: state.u_true(t) for t in problem.constrained}
        q = apply_duals(kern, problem.cost, u, state.gamma)
        mass = float(q.values.sum())
        assert state.mass() == pytest.approx(mass, rel=1e-10)
        grid = problem.cost.grid
        for t in range(grid.horizon + 1):
            lin, L = state.joint_marginal(t)
            assert np.allclose(lin * np.exp(L), dense_projection(q, (t,)), rtol=1e-10)

    def test_final_residuals_hold_after_refresh(self):
        problem = digital_micro(epsilon=0.2)
        state, history = solve(problem)
        rep = history.reports[-1]
        assert rep.worst_marginal <= 1e-6
        assert rep.worst_martingale <= 1e-8
        forward_messages(state)
        backward_messages(state)
        for t in problem.constrained:
            assert marginal_residual(state, t, problem.weights[t]) <= 1e-5

    def test_mass_is_one_at_convergence(self):
        problem = convex_mean_problem("lower", epsilon=0.3)
        state, _ = solve(problem)
        assert state.mass() == pytest.approx(1.0, abs=1e-5)

    def test_dual_trace_nondecreasing(self):
        for make in (
            lambda: digital_micro(epsilon=0.2),
            lambda: convex_mean_problem("lower", epsilon=0.3),
            lambda: convex_mean_problem("upper", epsilon=0.3),
        ):
            problem = make()
            state, history = solve(problem)
            trace = np.asarray(history.dual_trace)
            slack = 1e-10 * (1.0 + np.abs(trace[:-1]))
            assert np.all(np.diff(trace) >= -slack)

    def test_dual_objective_matches_trace(self):
        problem = convex_mean_problem("lower", epsilon=0.3)
        state, history = solve(problem)
        assert dual_objective(state, problem) == pytest.approx(
            history.reports[-1].dual_objective, rel=1e-8, abs=1e-10
        )

    def test_warm_start_converges_in_one_sweep(self):
        problem = digital_micro(epsilon=0.2)
        state, _ = solve(problem)
        warm = {
            "lambda": {t: state.lambda_at(t) for t in state.constrained},
            "gamma": [g.copy() for g in state.gamma],
        }
        _, again = solve(problem, warm=warm)
        assert again.converged
        assert again.sweeps == 1

    def test_convex_order_violation_rejected(self):
        cost = flat_cost([{"points": [0.0, 1.0]}, {"points": [0.0, 0.5, 1.0]}])
        problem = Problem(
            cost,
            {
                0: make_marginal("mixture", {"atoms": [0.0, 1.0], "weights": [1.0, 1.0]}),
                1: make_marginal("dirac", {"at": 0.5}),
            },
        )
        with pytest.raises(InfeasibleError, match="convex order"):
            solve(problem)

    def test_budget_exhaustion_carries_history(self):
        problem = convex_mean_problem("lower", epsilon=0.3)
        with pytest.raises(ConvergenceFailure) as info:
            solve(problem, SolveOptions(max_sweeps=1))
        assert info.value.report is not None
        assert info.value.report.sweeps == 1

    def test_touching_marginals_warn_and_strict_raises(self):
        cost = flat_cost([{"points": [0.0, 1.0]}, {"points": [0.0, 1.0]}])
        half = make_marginal("mixture", {"atoms": [0.0, 1.0], "weights": [1.0, 1.0]})
        problem = Problem(cost, {0: half, 1: half})
        with pytest.warns(UserWarning, match="irreducible"):
            solve(problem)
        with pytest.raises(InfeasibleError, match="irreducible"):
            solve(problem, SolveOptions(strict_irreducibility=True))

    def test_progress_callback_sees_every_sweep(self):
        problem = convex_mean_problem("lower", epsilon=0.3)
        seen = []
        _, history = solve(problem, SolveOptions(progress=seen.append))
        assert len(seen) == history.sweeps
        assert [r.iteration for r in seen] == list(range(1, history.sweeps + 1))

    def test_residual_rows_layout(self):
        problem = digital_micro(epsilon=0.2)
        _, history = solve(problem)
        rows = history.residual_rows()
        per_sweep = len(problem.constrained) + problem.cost.grid.horizon
        assert len(rows) == per_sweep * history.sweeps
        first = [(t, kind) for _, t, kind, _ in rows[:per_sweep]]
        assert first == [(0, "marginal"), (2, "marginal"), (0, "martingale"), (1, "martingale")]


class TestSchedule:
    def test_epsilon_continuation(self):
        problem = convex_mean_problem("lower", epsilon=0.5)
        final, state, history = solve_with_schedule(problem, [0.5, 0.2, 0.1])
        assert final.cost.epsilon == 0.1
        assert history.converged
        cold_state, cold_history = solve(
            Problem(problem.cost.with_epsilon(0.1), problem.marginals)
        )
        assert history.sweeps <= cold_history.sweeps
        assert dual_objective(state, final) == pytest.approx(
            dual_objective(cold_state, final), abs=1e-6
        )

    def test_empty_schedule_rejected(self):
        problem = convex_mean_problem("lower")
        from mmot import ProblemError

        with pytest.raises(ProblemError):
            solve_with_schedule(problem, [])

    def test_random_micro_instances_converge(self):
        rng = np.random.default_rng(42)
        for trial in range(8):
            problem = random_micro_problem(rng, epsilon=0.4)
            state, history = solve(problem)
            assert history.converged, trial
            trace = np.asarray(history.dual_trace)
            slack = 1e-10 * (1.0 + np.abs(trace[:-1]))
            assert np.all(np.diff(trace) >= -slack), trial
