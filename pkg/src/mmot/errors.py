"""Exception types shared across the package.

Three failure families matter to callers: the problem description is bad
(grids, marginals, payoff, config file), the problem is well-formed but
structurally infeasible, or the iteration ran out of budget. The CLI maps
the first two to exit code 1 and the last to exit code 2.
"""


class ProblemError(ValueError):
    """Malformed problem data: grids, marginals, payoffs or config files."""


class GridError(ProblemError):
    """Bad state-space data: grids out of order, feature-grid explosion,
    snapping collisions, indices out of range."""


class MarginalError(ProblemError):
    """Bad marginal data: weights off the grid, negative or non-normalized."""


class CostError(ProblemError):
    """Bad payoff data: unknown product, missing parameters."""


class InfeasibleError(ProblemError):
    """Well-formed input that admits no feasible transport.

    Examples: marginals out of convex order, a reachable state with no
    feasible successor, a state whose successors all lie on one side of it.
    """


class ConvergenceFailure(RuntimeError):
    """Solver exhausted its sweep budget before hitting the tolerances."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
