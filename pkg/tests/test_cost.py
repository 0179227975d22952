"""Stage costs: payoff decomposition, transition masking, kernels."""

import itertools

import numpy as np
import pytest

from mmot import (
    AuxRecursion,
    CostError,
    StagePayoff,
    StateGrid,
    assemble_stage_costs,
    build_aux_grids,
    build_price_grids,
    payoff_library,
)
from tests.helpers import direct_payoff, stage_payoff_along_path

UNIT_GRIDS = [{"points": [0.5]}, {"points": [0.25, 0.75]}, {"points": [0.0, 0.5, 1.0]}]
POSITIVE_GRIDS = [{"points": [1.0]}, {"points": [0.9, 1.1]}, {"points": [0.8, 1.0, 1.2]}]

PRODUCT_CASES = [
    ("max_of_max", {}, UNIT_GRIDS),
    ("floating_lookback_put", {}, UNIT_GRIDS),
    ("up_and_in_call", {"strike": 0.4, "barrier": 0.7}, UNIT_GRIDS),
    ("asian_straddle", {"strike": 0.5}, UNIT_GRIDS),
    ("average_price_call", {"strike": 0.4}, UNIT_GRIDS),
    ("digital", {"barrier": 0.75}, UNIT_GRIDS),
    ("variance_swap", {}, POSITIVE_GRIDS),
    ("variance_swap", {"strike_variance": 0.01}, POSITIVE_GRIDS),
    (
        "parisian_put",
        {"strike": 1.1, "window": 2, "sets": [0.95, 1.15]},
        POSITIVE_GRIDS,
    ),
    ("forward_start_call", {"memory_time": 1, "moneyness": 1.0}, POSITIVE_GRIDS),
    (
        "cliquet",
        {"local_cap": 0.05, "local_floor": -0.03, "global_floor": 0.01},
        POSITIVE_GRIDS,
    ),
]


def product_cost(price_entries, product, params, epsilon=0.5, direction="lower"):
    recursion, payoffs = payoff_library(product, params)
    price_grids = build_price_grids(price_entries)
    aux_grids = build_aux_grids(price_grids, recursion)
    grid = StateGrid(price_grids, aux_grids)
    return assemble_stage_costs(grid, recursion, payoffs, epsilon, direction)


class TestProductPayoffs:
    @pytest.mark.parametrize("product,params,entries", PRODUCT_CASES)
    def test_stage_sum_equals_path_payoff(self, product, params, entries):
        cost = product_cost(entries, product, params)
        grids = cost.grid.price_support
        ranges = [range(len(g)) for g in grids]
        checked = 0
        for path in itertools.product(*ranges):
            total = stage_payoff_along_path(cost, path)
            assert total is not None, path
            prices = [grids[t][i] for t, i in enumerate(path)]
            assert total == pytest.approx(
                direct_payoff(product, params, prices), abs=1e-12
            ), (product, prices)
            checked += 1
        assert checked == 6

    def test_unknown_product(self):
        with pytest.raises(CostError, match="unknown product"):
            payoff_library("rainbow")

    def test_missing_product_parameter(self):
        with pytest.raises(CostError, match="strike"):
            payoff_library("up_and_in_call", {"barrier": 0.7})


class TestStagePayoff:
    def test_unknown_kind(self):
        with pytest.raises(CostError):
            StagePayoff("terminal_squared")

    def test_missing_parameter(self):
        with pytest.raises(CostError):
            StagePayoff("straddle_terminal")

    def test_sum_of_convex_spreads_over_stages(self):
        rec = AuxRecursion("none")
        pay = StagePayoff("sum_of_convex", {"f": np.square})
        grids = build_price_grids(UNIT_GRIDS)
        grid = StateGrid(grids, build_aux_grids(grids, rec))
        cost = assemble_stage_costs(grid, rec, [pay], 0.5, "lower")
        for path in itertools.product(range(1), range(2), range(3)):
            prices = [grids[t][i] for t, i in enumerate(path)]
            want = np.mean(np.square(prices))
            assert stage_payoff_along_path(cost, path) == pytest.approx(want)

    def test_terminal_kinds_vanish_before_expiry(self):
        cost = product_cost(UNIT_GRIDS, "digital", {"barrier": 0.75})
        assert np.all(cost.stage(1).phi_data == 0.0)
        assert np.any(cost.stage(2).phi_data != 0.0)


class TestMasking:
    def test_max_transitions(self):
        cost = product_cost(UNIT_GRIDS, "max_of_max", {})
        grid = cost.grid
        rec = AuxRecursion("max")
        for t in (1, 2):
            feas = cost.stage(t).feasible_dense()
            s_prev, x_prev = grid.state_values(t - 1)
            s_now, x_now = grid.state_values(t)
            for i in range(grid.joint_size(t - 1)):
                for j in range(grid.joint_size(t)):
                    want = np.isclose(
                        rec.step(t, s_now[j], s_prev[i], x_prev[i]), x_now[j]
                    )
                    if t == 1:
                        want = want and bool(cost.reachable[0][i])
                    assert feas[i, j] == want, (t, i, j)

    def test_first_stage_rows_filtered_to_initial_rule(self):
        # two starting prices: only the (price, max=price) diagonal is a
        # legal time-0 state, the off-diagonal rows must carry no entries
        entries = [{"points": [0.25, 0.75]}, {"points": [0.25, 0.75]}]
        cost = product_cost(entries, "max_of_max", {})
        op = cost.stage(1)
        assert cost.reachable[0].tolist() == [True, False, False, True]
        rows_with_entries = np.flatnonzero(np.diff(op.indptr))
        assert np.array_equal(rows_with_entries, np.flatnonzero(cost.reachable[0]))

    def test_reachable_digital_states(self):
        cost = product_cost(
            [{"points": [0.5]}, {"points": [0.0, 1.0]}], "digital", {"barrier": 0.75}
        )
        # (s=0, hit=0) and (s=1, hit=1) are reachable, the cross states not
        assert cost.reachable[1].tolist() == [True, False, False, True]

    def test_every_price_move_possible(self):
        # features are deterministic functions of the path, so each state has
        # one feasible successor per next price
        cost = product_cost(UNIT_GRIDS, "asian_straddle", {"strike": 0.5})
        for t in (1, 2):
            op = cost.stage(t)
            counts = np.diff(op.indptr)
            live = counts > 0
            assert np.all(counts[live] == cost.grid.n_price(t))


class TestKernel:
    def test_lower_direction_sign(self):
        cost = product_cost(UNIT_GRIDS, "max_of_max", {}, epsilon=0.5, direction="lower")
        op = cost.stage(2)
        assert np.allclose(op.kernel_data, np.exp(-op.phi_data / 0.5))

    def test_upper_direction_sign(self):
        cost = product_cost(UNIT_GRIDS, "max_of_max", {}, epsilon=0.5, direction="upper")
        op = cost.stage(2)
        assert np.allclose(op.kernel_data, np.exp(op.phi_data / 0.5))

    def test_phi_keeps_true_payoff_under_upper(self):
        lower = product_cost(UNIT_GRIDS, "digital", {"barrier": 0.75}, direction="lower")
        upper = product_cost(UNIT_GRIDS, "digital", {"barrier": 0.75}, direction="upper")
        assert np.array_equal(lower.stage(2).phi_data, upper.stage(2).phi_data)

    def test_with_epsilon_rescales_kernel_only(self):
        cost = product_cost(UNIT_GRIDS, "digital", {"barrier": 0.75}, epsilon=0.5)
        hot = cost.with_epsilon(0.1)
        assert hot.epsilon == 0.1
        op, hop = cost.stage(2), hot.stage(2)
        assert np.array_equal(op.phi_data, hop.phi_data)
        assert np.array_equal(op.indices, hop.indices)
        assert np.allclose(hop.kernel_data, np.exp(-op.phi_data / 0.1))

    def test_nonpositive_epsilon_rejected(self):
        cost = product_cost(UNIT_GRIDS, "digital", {"barrier": 0.75})
        with pytest.raises(CostError):
            cost.with_epsilon(0.0)

    def test_overflow_reported(self):
        with pytest.raises(CostError, match="overflow"):
            product_cost(UNIT_GRIDS, "max_of_max", {}, epsilon=1e-4, direction="upper")


class TestValidation:
    def test_direction_names(self):
        with pytest.raises(CostError, match="direction"):
            product_cost(UNIT_GRIDS, "max_of_max", {}, direction="both")

    def test_log_return_payoffs_need_positive_grids(self):
        with pytest.raises(CostError, match="positive"):
            product_cost(UNIT_GRIDS, "variance_swap", {})

    def test_stage_index_range(self):
        cost = product_cost(UNIT_GRIDS, "max_of_max", {})
        with pytest.raises(CostError):
            cost.stage(0)
        with pytest.raises(CostError):
            cost.stage(3)

    def test_aux_grid_must_close(self):
        grids = build_price_grids(UNIT_GRIDS)
        aux = list(build_aux_grids(grids, AuxRecursion("max")))
        aux[2] = aux[2][:-1]  # drop the top running max
        grid = StateGrid(grids, tuple(aux))
        rec, payoffs = payoff_library("max_of_max")
        with pytest.raises(Exception, match="does not close"):
            assemble_stage_costs(grid, rec, payoffs, 0.5, "lower")


class TestOperatorViews:
    def test_dense_views_agree_with_sparse(self):
        cost = product_cost(UNIT_GRIDS, "asian_straddle", {"strike": 0.5})
        op = cost.stage(2)
        mat = op.matrix(op.phi_data).toarray()
        assert np.array_equal(mat, op.phi_dense())
        assert np.array_equal(op.feasible_dense(), op.matrix(np.ones_like(op.phi_data)).toarray() > 0)

    def test_delta_is_price_increment(self):
        cost = product_cost(UNIT_GRIDS, "max_of_max", {})
        grid = cost.grid
        op = cost.stage(2)
        s_prev, _ = grid.state_values(1)
        s_now, _ = grid.state_values(2)
        for i in range(grid.joint_size(1)):
            for k in range(op.indptr[i], op.indptr[i + 1]):
                j = op.indices[k]
                assert op.delta_data[k] == pytest.approx(s_now[j] - s_prev[i])
