"""Command-line front end: parse a problem file, solve, emit artifacts.

Problem files are TOML. The schema, by section:

- ``spec_version = 1`` (required).
- ``[problem]``: ``direction`` ("lower" | "upper"), ``epsilon`` and/or
  ``epsilon_schedule`` (a list solved in order with warm starts; when both
  are given the schedule must end at ``epsilon``).
- ``[[grid]]``: one entry per time or time range. Each carries ``t`` or
  ``t_range = [a, b]`` (inclusive) plus either ``points = [...]`` or
  ``interval = [lo, hi]`` with ``n``. Every time 0..T must be covered.
- ``[payoff]``: either ``product`` (a name from the product library) with
  ``[payoff.params]``, or a ``[[payoff.stage]]`` list of stage payoffs,
  each with ``kind`` and ``[payoff.stage.params]``. Function-valued
  parameters are written as expressions over the documented argument
  names, e.g. ``f = "s * s"`` for "sum_of_convex".
- ``[aux]``: feature recursion when no product implies one (``kind``,
  ``[aux.params]``), plus ``snap_tolerance`` and ``max_points`` overrides.
- ``[[marginal]]``: ``t``, ``kind``, ``[marginal.params]``; the listed
  times form the constrained set.
- ``[solver]``: solver option overrides by field name.
- ``[output]``: ``dir`` for artifacts (default: the spec path with
  ``_out`` appended; ``--output`` overrides).

``run`` solves and writes summary.json, couplings.csv, marginals.csv,
residuals.csv, lambda.csv, gamma.csv and duals.npz into the output
directory. Exit codes: 0 converged, 2 did not converge, 1 bad spec.
``validate`` reports marginal checks and grid growth without solving.
``max-law`` prints the analytic maximum-law curve for the terminal
marginal as CSV.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np
import tomli

from .analytic import azema_yor_max_law
from .cost import (
    PAYOFF_KINDS,
    PRODUCT_NAMES,
    StagePayoff,
    assemble_stage_costs,
    payoff_library,
)
from .errors import ConvergenceFailure, ProblemError
from .extract import (
    extract_solution,
    summary_dict,
    write_couplings_csv,
    write_duals,
    write_marginals_csv,
    write_residuals_csv,
    write_summary_json,
)
from .marginals import check_convex_order, check_irreducible, make_marginal
from .solver import Problem, SolveOptions, solve, solve_with_schedule
from .state_space import (
    AuxRecursion,
    StateGrid,
    build_aux_grids,
    build_price_grids,
    DEFAULT_AUX_CAP,
)

_EXPR_NAMES = {
    "abs": np.abs,
    "minimum": np.minimum,
    "maximum": np.maximum,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "where": np.where,
    "clip": np.clip,
}

# function-valued payoff parameters and the argument names their
# expressions may use
_FUNC_PARAMS = {
    ("sum_of_convex", "f"): ("s",),
    ("asian_terminal", "f"): ("x",),
    ("lookback_terminal", "f"): ("s", "x"),
}


def compile_expr(expr: str, argnames: tuple, where: str):
    """Compile an arithmetic expression into a vectorized function.

    Only the listed argument names and a fixed set of numpy helpers may
    appear; anything else (including attribute access) is rejected, which
    keeps spec files data, not code.
    """
    try:
        code = compile(expr, where, "eval")
    except SyntaxError as exc:
        raise ProblemError(f"{where}: bad expression {expr!r}: {exc.msg}") from None
    for name in code.co_names:
        if name not in _EXPR_NAMES and name not in argnames:
            raise ProblemError(
                f"{where}: name {name!r} not allowed in expressions "
                f"(arguments: {', '.join(argnames)})"
            )

    def fn(*args):
        scope = dict(zip(argnames, args))
        return eval(code, {"__builtins__": {}, **_EXPR_NAMES}, scope)

    return fn


@dataclasses.dataclass
class ProblemSpec:
    """Everything parsed from one problem file, before assembly."""

    path: Path
    direction: str
    epsilons: list
    grid_entries: list
    recursion: AuxRecursion
    aux_max_points: int
    payoffs: list
    marginals: dict
    options: SolveOptions
    out_dir: Path


def _section(data: dict, key: str, where: str) -> dict:
    val = data.get(key)
    if not isinstance(val, dict):
        raise ProblemError(f"{where}: missing [{key}] section")
    return val


def _parse_grid(tables, path) -> list:
    if not isinstance(tables, list) or not tables:
        raise ProblemError(f"{path}: need at least one [[grid]] entry")
    by_time = {}
    for k, entry in enumerate(tables):
        where = f"{path}: [[grid]] entry {k + 1}"
        if ("t" in entry) == ("t_range" in entry):
            raise ProblemError(f"{where}: give exactly one of t, t_range")
        if "t" in entry:
            times = [int(entry["t"])]
        else:
            a, b = (int(v) for v in entry["t_range"])
            if b < a:
                raise ProblemError(f"{where}: empty t_range {entry['t_range']}")
            times = list(range(a, b + 1))
        if "points" in entry:
            g = {"points": entry["points"]}
        elif "interval" in entry:
            g = {"interval": entry["interval"], "n": entry.get("n", 0)}
        else:
            raise ProblemError(f"{where}: give points or interval/n")
        for t in times:
            if t in by_time:
                raise ProblemError(f"{where}: time {t} specified twice")
            by_time[t] = g
    T = max(by_time)
    missing = [t for t in range(T + 1) if t not in by_time]
    if missing:
        raise ProblemError(f"{path}: no grid for times {missing}")
    return [by_time[t] for t in range(T + 1)]


def _parse_payoff(data: dict, horizon: int, path) -> tuple:
    """Returns (recursion or None, payoff list); recursion set by products."""
    section = _section(data, "payoff", path)
    has_product = "product" in section
    stages = section.get("stage")
    if has_product == bool(stages):
        raise ProblemError(f"{path}: [payoff] needs product or [[payoff.stage]], not both")
    if has_product:
        name = section["product"]
        if name not in PRODUCT_NAMES:
            raise ProblemError(
                f"{path}: unknown product {name!r}; known: {', '.join(PRODUCT_NAMES)}"
            )
        recursion, payoffs = payoff_library(name, section.get("params"))
        return recursion, payoffs

    payoffs = []
    for k, entry in enumerate(stages):
        where = f"{path}: [[payoff.stage]] entry {k + 1}"
        kind = entry.get("kind")
        if kind not in PAYOFF_KINDS:
            raise ProblemError(f"{where}: unknown kind {kind!r}; known: {', '.join(PAYOFF_KINDS)}")
        params = dict(entry.get("params", {}))
        for key, val in list(params.items()):
            argnames = _FUNC_PARAMS.get((kind, key))
            if argnames is not None:
                if not isinstance(val, str):
                    raise ProblemError(f"{where}: {key} must be an expression string")
                params[key] = compile_expr(val, argnames, where)
        if kind == "custom":
            table = params.get("stages")
            if not isinstance(table, dict):
                raise ProblemError(f"{where}: custom needs a stages table {{t = expr}}")
            compiled = {}
            for tkey, expr in table.items():
                t = int(tkey)
                if not 1 <= t <= horizon:
                    raise ProblemError(f"{where}: stage time {tkey} outside 1..{horizon}")
                compiled[t] = compile_expr(
                    expr, ("s_prev", "x_prev", "s_now", "x_now"), f"{where} t={tkey}"
                )
            params["stages"] = compiled
        payoffs.append(StagePayoff(kind, params))
    return None, payoffs


def _parse_aux(data: dict, implied: AuxRecursion, path) -> tuple:
    """Merge the [aux] section with a product-implied recursion."""
    section = data.get("aux", {})
    max_points = int(section.get("max_points", DEFAULT_AUX_CAP))
    snap = section.get("snap_tolerance")
    if implied is not None:
        if "kind" in section and section["kind"] != implied.kind:
            raise ProblemError(
                f"{path}: [aux] kind {section['kind']!r} conflicts with the "
                f"product's feature recursion {implied.kind!r}"
            )
        if "params" in section:
            raise ProblemError(f"{path}: [aux] params conflict with the product's recursion")
        recursion = implied
        if snap is not None:
            recursion = dataclasses.replace(recursion, snap_tolerance=float(snap))
        return recursion, max_points
    kind = section.get("kind", "none")
    params = dict(section.get("params", {}))
    if kind == "custom_table":
        for key, argnames in (("init", ("s",)), ("step", ("t", "s", "s_prev", "x_prev"))):
            expr = params.get(key)
            if not isinstance(expr, str):
                raise ProblemError(f"{path}: [aux] custom_table needs expression {key!r}")
            params[key] = compile_expr(expr, argnames, f"{path}: [aux].{key}")
    return AuxRecursion(kind, params, None if snap is None else float(snap)), max_points


def _parse_marginals(data: dict, horizon: int, path) -> dict:
    tables = data.get("marginal")
    if not isinstance(tables, list) or not tables:
        raise ProblemError(f"{path}: need at least one [[marginal]] entry")
    out = {}
    for k, entry in enumerate(tables):
        where = f"{path}: [[marginal]] entry {k + 1}"
        try:
            t = int(entry["t"])
        except KeyError:
            raise ProblemError(f"{where}: missing t") from None
        if not 0 <= t <= horizon:
            raise ProblemError(f"{where}: time {t} outside 0..{horizon}")
        if t in out:
            raise ProblemError(f"{where}: time {t} listed twice")
        try:
            out[t] = make_marginal(entry.get("kind", ""), entry.get("params", {}))
        except ProblemError as exc:
            raise ProblemError(f"{where}: {exc}") from None
    return out


def parse_spec(path) -> ProblemSpec:
    """Read and structurally validate a problem file."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError:
        raise ProblemError(f"{path}: no such file") from None
    except tomli.TOMLDecodeError as exc:
        raise ProblemError(f"{path}: not valid TOML: {exc}") from None

    if data.get("spec_version") != 1:
        raise ProblemError(f"{path}: spec_version must be 1")

    prob = _section(data, "problem", path)
    direction = prob.get("direction", "lower")
    if direction not in ("lower", "upper"):
        raise ProblemError(f"{path}: [problem] direction must be lower or upper")
    schedule = prob.get("epsilon_schedule")
    epsilon = prob.get("epsilon")
    if schedule is None and epsilon is None:
        raise ProblemError(f"{path}: [problem] needs epsilon or epsilon_schedule")
    if schedule is None:
        schedule = [float(epsilon)]
    else:
        schedule = [float(e) for e in schedule]
        if epsilon is not None and float(epsilon) != schedule[-1]:
            raise ProblemError(
                f"{path}: [problem] epsilon {epsilon} disagrees with the schedule end "
                f"{schedule[-1]}"
            )
    if not schedule or any(e <= 0 for e in schedule):
        raise ProblemError(f"{path}: epsilon values must be positive")

    grid_entries = _parse_grid(data.get("grid"), path)
    horizon = len(grid_entries) - 1
    implied, payoffs = _parse_payoff(data, horizon, path)
    recursion, max_points = _parse_aux(data, implied, path)
    marginals = _parse_marginals(data, horizon, path)

    solver_section = data.get("solver", {})
    allowed = {f.name for f in dataclasses.fields(SolveOptions)} - {"progress"}
    unknown = set(solver_section) - allowed
    if unknown:
        raise ProblemError(f"{path}: unknown [solver] keys {sorted(unknown)}")
    options = SolveOptions(**solver_section)

    out_dir = Path(data.get("output", {}).get("dir", f"{path.with_suffix('')}_out"))
    return ProblemSpec(
        path=path,
        direction=direction,
        epsilons=schedule,
        grid_entries=grid_entries,
        recursion=recursion,
        aux_max_points=max_points,
        payoffs=payoffs,
        marginals=marginals,
        options=options,
        out_dir=out_dir,
    )


def build_problem(spec: ProblemSpec) -> Problem:
    """Assemble grids, cost structure and marginals into a Problem."""
    price_grids = build_price_grids(spec.grid_entries)
    aux_grids = build_aux_grids(price_grids, spec.recursion, spec.aux_max_points)
    grid = StateGrid(price_grids, aux_grids)
    cost = assemble_stage_costs(
        grid, spec.recursion, spec.payoffs, spec.epsilons[0], spec.direction
    )
    return Problem(cost, spec.marginals)


def _stream_residuals(fh):
    def hook(report):
        for t in sorted(report.marginal_res):
            fh.write(f"{report.iteration},{t},marginal,{report.marginal_res[t]!r}\n")
        for t in sorted(report.martingale_res):
            fh.write(f"{report.iteration},{t},martingale,{report.martingale_res[t]!r}\n")
        fh.flush()

    return hook


def _load_warm(source) -> dict:
    """Warm-start duals from a duals.npz (or a run output directory)."""
    path = Path(source)
    if path.is_dir():
        path = path / "duals.npz"
    if not path.exists():
        raise ProblemError(f"{path}: no duals file to seed from")
    with np.load(path) as data:
        warm = {"lambda": {}, "gamma": []}
        gammas = {}
        for key in data.files:
            field, t = key.rsplit("_", 1)
            if field == "lambda":
                warm["lambda"][int(t)] = data[key]
            elif field == "gamma":
                gammas[int(t)] = data[key]
        warm["gamma"] = [gammas[t] for t in sorted(gammas)] if gammas else None
    return warm


def _verify(problem: Problem, state, solution) -> float:
    """Cross-check against the dense oracle where the caps allow it."""
    from . import oracle
    from .solver import dual_objective

    grid = problem.cost.grid
    dims = [grid.joint_size(t) for t in range(grid.horizon + 1)]
    deviations = []
    if int(np.prod(dims)) <= oracle.DENSE_CAP:
        kern = oracle.kernel_tensor(problem.cost)
        u = {t: state.u_true(t) for t in state.constrained}
        dense = oracle.apply_duals(kern, problem.cost, u, state.gamma)
        dense_price = float(
            (oracle.payoff_tensor(problem.cost).values * dense.values).sum()
        )
        dev = abs(dense_price - solution.price)
        deviations.append(dev)
        print(f"verify: dense price {dense_price!r}, structured {solution.price!r}, "
              f"deviation {dev:.3e}")
        gap = oracle.regularized_objective(problem.cost, dense) - dual_objective(state, problem)
        print(f"verify: duality gap {gap:.3e}")
    else:
        print(f"verify: joint state space {dims} exceeds the dense cap, skipped")
    try:
        lp = oracle.lp_value_small(problem)
        print(f"verify: exact unregularized value {lp!r} "
              f"(regularized price {solution.price!r})")
    except ProblemError as exc:
        print(f"verify: LP skipped ({exc})")
    worst = max(deviations, default=0.0)
    print(f"verify: max deviation {worst:.3e}")
    return worst


def cmd_run(args) -> int:
    spec = parse_spec(args.spec)
    problem = build_problem(spec)
    out_dir = Path(args.output) if args.output else spec.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    opts = spec.options
    log_fh = None
    if args.residual_log:
        log_fh = open(args.residual_log, "w")
        log_fh.write("iter,t,kind,residual\n")
        opts = dataclasses.replace(opts, progress=_stream_residuals(log_fh))
    warm = _load_warm(args.seed_solve_from) if args.seed_solve_from else None

    start = time.perf_counter()
    try:
        if len(spec.epsilons) > 1:
            problem, state, history = solve_with_schedule(
                problem, spec.epsilons, opts, warm=warm
            )
        else:
            state, history = solve(problem, opts, warm=warm)
    except ConvergenceFailure as exc:
        if exc.report is not None:
            write_residuals_csv(out_dir / "residuals.csv", exc.report)
        print(f"{spec.path}: {exc}", file=sys.stderr)
        return 2
    finally:
        if log_fh is not None:
            log_fh.close()
    wall = time.perf_counter() - start

    solution = extract_solution(state, problem, history)
    grid = problem.cost.grid
    write_summary_json(out_dir / "summary.json", summary_dict(solution, problem, wall))
    write_couplings_csv(out_dir / "couplings.csv", solution, grid)
    write_marginals_csv(out_dir / "marginals.csv", solution, grid)
    write_residuals_csv(out_dir / "residuals.csv", history)
    write_duals(f"{out_dir}/", state)
    if args.verify:
        _verify(problem, state, solution)
    print(
        f"price {solution.price!r} ({problem.cost.direction} bound, "
        f"epsilon {problem.cost.epsilon}, {history.sweeps} sweeps, {wall:.1f}s) -> {out_dir}"
    )
    return 0


def cmd_validate(args) -> int:
    spec = parse_spec(args.spec)
    print(f"{spec.path}: direction {spec.direction}, epsilon schedule {spec.epsilons}")

    times = sorted(spec.marginals)
    for a, b in zip(times, times[1:]):
        try:
            order = check_convex_order(spec.marginals[a], spec.marginals[b])
        except ProblemError as exc:
            print(f"marginals {a}->{b}: check failed: {exc}")
            continue
        if order.ordered:
            print(f"marginals {a}->{b}: convex order ok")
        else:
            print(
                f"marginals {a}->{b}: NOT in convex order "
                f"(worst strike {order.worst_strike}, gap {order.gap!r})"
            )
            continue
        irr = check_irreducible(spec.marginals[a], spec.marginals[b])
        if irr.irreducible:
            print(f"marginals {a}->{b}: irreducible")
        else:
            print(
                f"marginals {a}->{b}: reducible at z={irr.witness_z!r}; dual "
                f"optimizers may not be attained (expect clamped martingale duals)"
            )

    try:
        price_grids = build_price_grids(spec.grid_entries)
        aux_grids = build_aux_grids(price_grids, spec.recursion, spec.aux_max_points)
    except ProblemError as exc:
        print(f"grid construction: {exc}")
        return 0
    n_price = [len(g) for g in price_grids]
    n_aux = [len(g) for g in aux_grids]
    joint = [p * a for p, a in zip(n_price, n_aux)]
    kernel_entries = sum(joint[t - 1] * n_price[t] for t in range(1, len(joint)))
    print(f"price grid sizes: {n_price}")
    print(f"feature grid sizes: {n_aux}")
    print(f"joint state sizes: {joint}")
    print(f"kernel storage: {kernel_entries} entries")
    return 0


def cmd_max_law(args) -> int:
    spec = parse_spec(args.spec)
    t_last = max(spec.marginals)
    mu = spec.marginals[t_last]
    s0 = mu.mean()
    if args.barriers:
        lo, hi, n = args.barriers
        barriers = np.linspace(float(lo), float(hi), int(n))
    else:
        top = float(mu.support.max())
        span = max(top - s0, 1e-6)
        barriers = np.linspace(s0 + 1e-6 * span, top, 1001)
    curve = azema_yor_max_law(mu, s0, barriers)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        out.write("B,tail_prob\n")
        for b, p in zip(curve.barriers, curve.tail_probs):
            out.write(f"{float(b)!r},{float(p)!r}\n")
        out.write(f"# expected maximum {curve.price!r}\n")
    finally:
        if args.out:
            out.close()
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mmot",
        description="Entropic martingale optimal transport on feature-augmented grids.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="solve a problem file and write artifacts")
    p_run.add_argument("spec", help="problem file (TOML)")
    p_run.add_argument("--output", help="artifact directory (overrides [output] dir)")
    p_run.add_argument(
        "--verify", action="store_true",
        help="cross-check against the dense oracle when within its size caps",
    )
    p_run.add_argument(
        "--residual-log", metavar="PATH",
        help="stream per-sweep residuals to PATH while solving",
    )
    p_run.add_argument(
        "--seed-solve-from", metavar="PATH",
        help="warm-start from a previous run's duals.npz (or its output directory)",
    )
    p_run.set_defaults(fn=cmd_run)

    p_val = sub.add_parser("validate", help="check a problem file without solving")
    p_val.add_argument("spec", help="problem file (TOML)")
    p_val.set_defaults(fn=cmd_validate)

    p_curve = sub.add_parser(
        "max-law", help="analytic law of the maximum for the terminal marginal"
    )
    p_curve.add_argument("spec", help="problem file (TOML)")
    p_curve.add_argument("--out", help="write CSV here instead of stdout")
    p_curve.add_argument(
        "--barriers", nargs=3, metavar=("LO", "HI", "N"),
        help="barrier grid (default: from the marginal support)",
    )
    p_curve.set_defaults(fn=cmd_max_law)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ProblemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
