"""Entropic multi-period martingale optimal transport on feature-augmented grids.

The pipeline runs state_space -> cost -> solver -> extract: build per-time
price and feature grids, assemble sparse stage operators for a product
payoff, run coordinate dual ascent with closed-form marginal blocks and
Newton martingale blocks, then read prices, couplings and dual hedges off
the converged scaling state. oracle holds dense and LP cross-checks for
micro instances; analytic holds closed-form baselines; cli is the TOML
front end.
"""

from .errors import (
    ConvergenceFailure,
    CostError,
    GridError,
    InfeasibleError,
    MarginalError,
    ProblemError,
)
from .state_space import (
    AuxRecursion,
    StateGrid,
    build_aux_grids,
    build_price_grids,
    joint_index,
    split_index,
)
from .marginals import (
    DiscreteMarginal,
    check_convex_order,
    check_irreducible,
    grid_weights,
    make_marginal,
)
from .cost import (
    PRODUCT_NAMES,
    StageCost,
    StagePayoff,
    assemble_stage_costs,
    payoff_library,
)
from .solver import (
    DualState,
    Problem,
    ResidualReport,
    SolveHistory,
    SolveOptions,
    dual_objective,
    solve,
    solve_with_schedule,
)
from .extract import (
    Solution,
    export_hedge,
    extract_solution,
    pairwise_coupling,
    price,
    projection,
    solution_marginal,
)
from .analytic import (
    MaxLawCurve,
    azema_yor_max_law,
    digital_reference,
    late_early_values,
)

__all__ = [
    "AuxRecursion",
    "ConvergenceFailure",
    "CostError",
    "DiscreteMarginal",
    "DualState",
    "GridError",
    "InfeasibleError",
    "MarginalError",
    "MaxLawCurve",
    "PRODUCT_NAMES",
    "Problem",
    "ProblemError",
    "ResidualReport",
    "Solution",
    "SolveHistory",
    "SolveOptions",
    "StageCost",
    "StagePayoff",
    "StateGrid",
    "assemble_stage_costs",
    "azema_yor_max_law",
    "build_aux_grids",
    "build_price_grids",
    "check_convex_order",
    "check_irreducible",
    "digital_reference",
    "dual_objective",
    "export_hedge",
    "extract_solution",
    "grid_weights",
    "joint_index",
    "late_early_values",
    "make_marginal",
    "pairwise_coupling",
    "payoff_library",
    "price",
    "projection",
    "solution_marginal",
    "solve",
    "solve_with_schedule",
    "split_index",
]
