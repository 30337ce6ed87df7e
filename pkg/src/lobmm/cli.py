"""Command-line entry point: calibrate, solve, backtest, frontier, export.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or validation error.
Every subcommand accepts ``--config file.json`` whose keys are option names
(dashes or underscores); flags given on the command line take precedence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Callable, Sequence

from .analytics import (
    FRONTIER_GAMMAS,
    AnalyticsError,
    efficient_frontier,
    frontier_csv,
    policy_heatmap_export,
    wealth_histogram,
)
from .calibration import CalibrationError, calibrate, read_ticks_csv
from .model import FeeSchedule, MarketModel, ModelError, SpreadGrid, reference_model
from .simulator import (
    SimConfig,
    SimulationError,
    Strategy,
    per_path_csv,
    read_per_path_csv,
    stats_table_csv,
    summarize,
    simulate_paths,
)
from .solver import PolicyTable, SolverError, SolverGrid, SolverParams, check_solution, solve

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

_VALIDATION_ERRORS = (ModelError, CalibrationError, SolverError, SimulationError, AnalyticsError)


class UsageError(Exception):
    pass


# file plumbing -----------------------------------------------------------------------


def write_atomic(path: str | Path, text: str) -> None:
    """Write via a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    folder = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=folder)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_text(path: str, what: str) -> str:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc.strerror or exc}") from None
    if not text.strip():
        raise UsageError(f"{what} {path} is empty")
    return text


def load_model(path: str) -> MarketModel:
    return MarketModel.from_json(_read_text(path, "model file"))


def load_policy(path: str) -> PolicyTable:
    return PolicyTable.from_json(_read_text(path, "policy file"))


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _suffixed(path: str, name: str) -> str:
    p = Path(path)
    return str(p.with_name(f"{p.stem}.{name}{p.suffix}"))


# subcommands -------------------------------------------------------------------------


def cmd_reference_model(a: argparse.Namespace) -> int:
    model = reference_model(symmetric=not a.asymmetric, clock_rate=a.clock_rate, horizon=a.T, sigma=a.sigma, p0=a.p0)
    write_atomic(a.out, model.to_json() + "\n")
    return EXIT_OK


def cmd_calibrate(a: argparse.Namespace) -> int:
    if not Path(a.input).is_file():
        raise UsageError(f"input file {a.input} does not exist")
    ticks = read_ticks_csv(a.input)
    if not a.buckets:
        raise UsageError("--buckets needs at least two boundaries")
    fees = FeeSchedule(a.rebate, a.take_fee, a.fixed_fee)
    model, report = calibrate(
        ticks,
        SpreadGrid(a.delta, a.m),
        a.buckets,
        v0=a.v0,
        period=a.period,
        fees=fees,
        sigma=a.sigma,
        max_gap=a.max_gap,
        symmetric=a.symmetrize,
    )
    report_path = a.report or _suffixed(a.out, "report")
    write_atomic(a.out, model.to_json() + "\n")
    write_atomic(report_path, json.dumps(report.to_dict(), indent=1) + "\n")
    return EXIT_OK


def _grid_from(a: argparse.Namespace, m: int) -> SolverGrid:
    return SolverGrid(T=a.T, n_out=a.n_out, y_min=a.y_min, y_max=a.y_max, dy=a.dy, m=m)


def _params_from(a: argparse.Namespace, model: MarketModel) -> SolverParams:
    b = a.b if a.b is not None else model.price.b
    sigma = a.price_sigma if a.price_sigma is not None else model.price.sigma
    gamma = a.gamma
    if a.objective == "exponential" and gamma is None:
        gamma = 0.0
    return SolverParams(
        objective=a.objective,
        gamma=5.0 if gamma is None else gamma,
        lbar=a.lbar,
        ebar=a.ebar,
        eta=a.eta,
        b=b if a.objective == "exponential" else 0.0,
        sigma=sigma if a.objective == "exponential" else 0.0,
        inventory_unit=a.inventory_unit,
    )


def cmd_solve(a: argparse.Namespace) -> int:
    model = load_model(a.model)
    grid = _grid_from(a, model.m)
    params = _params_from(a, model)
    surface, policy = solve(model, grid, params)
    diag = check_solution(surface, model, grid, params)
    if not diag["min_value"] == diag["min_value"] or (params.objective == "exponential" and not diag["positive"]):
        print("error: solver produced invalid values", file=sys.stderr)
        return EXIT_RUNTIME
    policy.meta["diagnostics"] = {k: v for k, v in diag.items() if k != "positive"}
    write_atomic(a.out, policy.to_json() + "\n")
    if a.dump_values:
        write_atomic(a.dump_values, surface.to_csv())
    return EXIT_OK


def _sim_config(a: argparse.Namespace) -> SimConfig:
    return SimConfig(T=a.T, dt=a.dt, n_paths=a.paths, seed=a.seed, x0=a.x0, y0=a.y0, p0=a.p0, i0=a.i0)


def _strategy(name: str, a: argparse.Namespace) -> Strategy:
    if name == "star":
        if not a.policy:
            raise UsageError("strategy star needs --policy")
        return Strategy.from_policy(load_policy(a.policy), "optimal")
    if name == "womo":
        if not a.policy_womo:
            raise UsageError("strategy womo needs --policy-womo")
        pol = load_policy(a.policy_womo)
        if pol.has_take:
            raise UsageError("--policy-womo contains market orders (solve it with --ebar 0)")
        return Strategy.from_policy(pol, "womo")
    if name == "constant":
        return Strategy.constant(a.l0)
    return Strategy.random(a.l0)


_TABLE_NAMES = {"star": "optimal", "womo": "womo", "constant": "constant", "random": "random"}


def cmd_backtest(a: argparse.Namespace) -> int:
    model = load_model(a.model)
    config = _sim_config(a)
    config.validate(model)
    names = ["star", "womo", "constant", "random"] if a.strategy == "all" else [a.strategy]
    strategies = {n: _strategy(n, a) for n in names}
    results = {}
    for n, strat in strategies.items():
        paths = simulate_paths(strat, model, config, a.threads)
        results[_TABLE_NAMES[n]] = summarize(paths)
        if a.per_path:
            target = a.per_path if len(names) == 1 else _suffixed(a.per_path, _TABLE_NAMES[n])
            write_atomic(target, per_path_csv(paths))
    write_atomic(a.out, stats_table_csv(results))
    return EXIT_OK


def cmd_frontier(a: argparse.Namespace) -> int:
    if not a.gammas:
        raise UsageError("--gammas must list at least one value")
    if any(not g > 0 for g in a.gammas):
        raise UsageError("--gammas must all be positive")
    model = load_model(a.model)
    config = _sim_config(a)
    config.validate(model)
    grid = _grid_from(a, model.m)
    params = SolverParams(lbar=a.lbar, ebar=a.ebar, inventory_unit=a.inventory_unit)
    rows = efficient_frontier(model, a.gammas, grid, config, params, l0=a.l0, threads=a.threads)
    write_atomic(a.out, frontier_csv(rows))
    return EXIT_OK


def cmd_export(a: argparse.Namespace) -> int:
    if a.policy:
        if a.slice is None or not a.out:
            raise UsageError("policy export needs --slice and --out")
        write_atomic(a.out, policy_heatmap_export(load_policy(a.policy), a.slice))
        return EXIT_OK
    if a.stats:
        if not a.hist:
            raise UsageError("histogram export needs --hist")
        try:
            paths = read_per_path_csv(_read_text(a.stats, "per-path file"))
        except ValueError as exc:
            raise UsageError(f"{a.stats}: {exc}") from None
        write_atomic(a.hist, wealth_histogram(paths[a.column], a.bins))
        return EXIT_OK
    raise UsageError("export needs either --policy or --stats")


# parser --------------------------------------------------------------------------------


def _add_grid(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver grid")
    g.add_argument("--T", type=float, default=300.0, help="horizon in seconds (default: 300)")
    g.add_argument("--n-out", type=int, default=100, help="stored time slices (default: 100)")
    g.add_argument("--y-min", type=float, default=-1000.0, help="lowest inventory node (default: -1000)")
    g.add_argument("--y-max", type=float, default=1000.0, help="highest inventory node (default: 1000)")
    g.add_argument("--dy", type=float, default=10.0, help="inventory step in shares (default: 10)")
    g.add_argument("--lbar", type=float, default=100.0, help="max limit-order size (default: 100)")
    g.add_argument("--ebar", type=float, default=100.0, help="max market-order size, 0 disables them (default: 100)")
    g.add_argument(
        "--inventory-unit",
        type=float,
        default=1000.0,
        help="shares per unit in the inventory penalty gamma*(y/unit)^2 (default: 1000)",
    )


def _add_sim(p: argparse.ArgumentParser, paths_default: int) -> None:
    g = p.add_argument_group("simulation")
    g.add_argument("--paths", type=int, default=paths_default, help=f"Monte Carlo paths (default: {paths_default})")
    g.add_argument("--dt", type=float, default=0.3, help="Euler time step in seconds (default: 0.3)")
    g.add_argument("--x0", type=float, default=0.0, help="initial cash (default: 0)")
    g.add_argument("--y0", type=float, default=0.0, help="initial inventory (default: 0)")
    g.add_argument("--p0", type=float, default=45.0, help="initial mid price (default: 45)")
    g.add_argument("--i0", type=int, default=1, help="initial spread state (default: 1)")
    g.add_argument("--l0", type=float, default=100.0, help="order size of the constant/random benchmarks (default: 100)")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with option values; command-line flags override it")
    p.add_argument("--seed", type=int, default=0, help="random seed, the only source of randomness (default: 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it (default: 1)")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="lobmm",
        description="Market making on a limit order book with a Markov spread: calibrate, solve, backtest.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    subs: dict[str, argparse.ArgumentParser] = {}

    def add(name: str, fn: Callable[[argparse.Namespace], int], help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help)
        p.set_defaults(func=fn)
        _add_common(p)
        subs[name] = p
        return p

    p = add("reference-model", cmd_reference_model, "write the reference six-state market model as JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--asymmetric", action="store_true", help="keep bid and ask intensities as tabulated")
    p.add_argument("--clock-rate", type=float, default=1.0, help="spread-change clock rate per second (default: 1)")
    p.add_argument("--T", type=float, default=300.0, help="horizon covered by the clock (default: 300)")
    p.add_argument("--sigma", type=float, default=None, help="mid-price volatility per sqrt(s) (default: 0.3 ticks)")
    p.add_argument("--p0", type=float, default=45.0, help="initial mid price (default: 45)")

    p = add("calibrate", cmd_calibrate, "estimate a market model from level-1 tick data")
    p.add_argument("--input", required=True, help="CSV with header ts,bid,ask,bid_sz,ask_sz,buy_vol,sell_vol")
    p.add_argument("--delta", type=float, default=0.005, help="tick size (default: 0.005)")
    p.add_argument("--m", type=int, default=6, help="number of spread states (default: 6)")
    p.add_argument("--v0", type=float, default=100.0, help="execution proxy order size (default: 100)")
    p.add_argument("--buckets", type=_float_list, required=True, help="clock bucket boundaries, comma-separated seconds")
    p.add_argument("--period", type=float, default=None, help="fold exposure modulo this period, e.g. 86400")
    p.add_argument("--max-gap", type=float, default=4 * 3600.0, help="gap in seconds that splits the data (default: 14400)")
    p.add_argument("--sigma", type=float, default=None, help="mid-price volatility to store (default: 0.3 ticks)")
    p.add_argument("--rebate", type=float, default=0.0008, help="maker rebate per share (default: 0.0008)")
    p.add_argument("--take-fee", type=float, default=0.0012, help="taker fee per share (default: 0.0012)")
    p.add_argument("--fixed-fee", type=float, default=1e-6, help="fixed fee per market order (default: 1e-6)")
    p.add_argument("--symmetrize", action="store_true", help="average bid and ask execution intensities")
    p.add_argument("--out", required=True, help="model JSON output")
    p.add_argument("--report", default=None, help="report JSON output (default: <out>.report.json)")

    p = add("solve", cmd_solve, "solve for the optimal policy table")
    p.add_argument("--model", required=True)
    p.add_argument("--objective", choices=("mean_penalty", "exponential"), default="mean_penalty")
    p.add_argument("--gamma", type=float, default=None, help="inventory penalty (default: 5; 0 for exponential)")
    p.add_argument("--eta", type=float, default=0.0, help="risk aversion of the exponential objective (default: 0)")
    p.add_argument("--b", type=float, default=None, help="price drift for the exponential objective (default: model)")
    p.add_argument("--price-sigma", type=float, default=None, help="price volatility for the exponential objective (default: model)")
    _add_grid(p)
    p.add_argument("--out", required=True, help="policy JSON output")
    p.add_argument("--dump-values", default=None, help="also write the value surface as CSV")

    p = add("backtest", cmd_backtest, "Monte Carlo backtest of policies and benchmarks")
    p.add_argument("--model", required=True)
    p.add_argument("--policy", default=None, help="optimal policy JSON")
    p.add_argument("--policy-womo", default=None, help="policy JSON solved without market orders")
    p.add_argument("--strategy", choices=("star", "womo", "constant", "random", "all"), default="all")
    p.add_argument("--T", type=float, default=300.0, help="horizon in seconds (default: 300)")
    _add_sim(p, 100_000)
    p.add_argument("--out", required=True, help="statistics CSV output")
    p.add_argument("--per-path", default=None, help="per-path CSV output (suffixed by strategy when several)")

    p = add("frontier", cmd_frontier, "sweep the inventory penalty and tabulate the efficient frontier")
    p.add_argument("--model", required=True)
    p.add_argument(
        "--gammas",
        type=_float_list,
        default=list(FRONTIER_GAMMAS),
        help="comma-separated penalties (default: 50 halving to 0.006, 14 values)",
    )
    _add_grid(p)
    _add_sim(p, 10_000)
    p.add_argument("--out", required=True, help="frontier CSV output")

    p = add("export", cmd_export, "export plot data: policy slice heatmap or wealth histogram")
    p.add_argument("--policy", default=None)
    p.add_argument("--slice", type=float, default=None, help="time of the policy slice in seconds")
    p.add_argument("--out", default=None, help="heatmap CSV output")
    p.add_argument("--stats", default=None, help="per-path CSV from backtest --per-path")
    p.add_argument("--hist", default=None, help="histogram CSV output")
    p.add_argument("--bins", type=int, default=50, help="histogram bins (default: 50)")
    p.add_argument("--column", default="x_T", choices=("x_T", "n_bid", "n_ask", "n_market", "max_abs_y"))
    return parser, subs


def _apply_config(argv: Sequence[str], subs: dict[str, argparse.ArgumentParser]) -> None:
    """Install values from ``--config`` as subcommand defaults, before the real parse."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    if not known.config or command not in subs:
        return
    try:
        cfg = json.loads(_read_text(known.config, "config file"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {known.config} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    sp = subs[command]
    actions = {a.dest: a for a in sp._actions}
    values: dict[str, Any] = {}
    for key, v in cfg.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("config", "help", "func"):
            raise UsageError(f"unknown option {key!r} in config file")
        if dest in ("gammas", "buckets") and not isinstance(v, list):
            v = _float_list(v)
        values[dest] = v
        # a required flag may now come from the config
        actions[dest].required = False
    sp.set_defaults(**values)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        _apply_config(argv, subs)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if args.seed < 0:
            raise UsageError("--seed must be >= 0")
        return args.func(args)
    except (UsageError, *_VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, RuntimeError, MemoryError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
