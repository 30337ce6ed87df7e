"""Information ratios, the gamma sweep (efficient frontier) and plot-data exports."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .model import MarketModel
from .simulator import BacktestStats, SimConfig, Strategy, run_backtest
from .solver import PolicyTable, SolverGrid, SolverParams, solve_mean_criterion

FRONTIER_GAMMAS = (50.0, 25.0, 12.5, 6.25, 3.125, 1.563, 0.781, 0.391, 0.195, 0.098, 0.049, 0.024, 0.012, 0.006)
FRONTIER_COLUMNS = ("gamma", "sigma_star", "mean_star", "sigma_womo", "mean_womo", "ir", "nir")


class AnalyticsError(ValueError):
    pass


def _mean_std(stats) -> tuple[float, float]:
    if isinstance(stats, BacktestStats):
        return stats.mean["x_T"], stats.std["x_T"]
    m, s = stats
    return float(m), float(s)


def information_ratio(stats) -> float:
    """``m / sigma`` of terminal wealth; ``stats`` is a BacktestStats or ``(mean, std)``."""
    m, s = _mean_std(stats)
    if not s > 0:
        raise AnalyticsError("information ratio undefined: terminal wealth has zero dispersion")
    return m / s


def net_information_ratio(stats, benchmark_stats) -> float:
    """Information ratio after subtracting the benchmark's mean terminal wealth."""
    m, s = _mean_std(stats)
    mb, _ = _mean_std(benchmark_stats)
    if not s > 0:
        raise AnalyticsError("net information ratio undefined: terminal wealth has zero dispersion")
    return (m - mb) / s


@dataclass(frozen=True)
class FrontierRow:
    gamma: float
    sigma_star: float
    mean_star: float
    sigma_womo: float
    mean_womo: float
    ir: float
    nir: float
    mean_benchmark: float = 0.0

    def __post_init__(self) -> None:
        if self.sigma_star < 0 or self.sigma_womo < 0:
            raise AnalyticsError("standard deviations must be >= 0")


def _ratio(m: float, s: float) -> float:
    return m / s if s > 0 else math.nan


def frontier_point(
    model: MarketModel,
    gamma: float,
    grid: SolverGrid,
    config: SimConfig,
    params: SolverParams | None = None,
    l0: float = 100.0,
    threads: int = 1,
    benchmark: BacktestStats | None = None,
) -> FrontierRow:
    """Solve and backtest the optimal and WoMO policies at one penalty level."""
    base = params or SolverParams()
    star_params = replace(base, gamma=gamma)
    _, star = solve_mean_criterion(model, grid, star_params)
    _, womo = solve_mean_criterion(model, grid, replace(star_params, ebar=0.0))
    s_star = run_backtest(Strategy.from_policy(star, "optimal"), model, config, threads)
    s_womo = run_backtest(Strategy.from_policy(womo, "womo"), model, config, threads)
    if benchmark is None:
        benchmark = run_backtest(Strategy.constant(l0), model, config, threads)
    m, s = s_star.mean["x_T"], s_star.std["x_T"]
    mb = benchmark.mean["x_T"]
    return FrontierRow(
        gamma=float(gamma),
        sigma_star=s,
        mean_star=m,
        sigma_womo=s_womo.std["x_T"],
        mean_womo=s_womo.mean["x_T"],
        ir=_ratio(m, s),
        nir=_ratio(m - mb, s),
        mean_benchmark=mb,
    )


def efficient_frontier(
    model: MarketModel,
    gammas: Sequence[float] = FRONTIER_GAMMAS,
    grid: SolverGrid | None = None,
    config: SimConfig | None = None,
    params: SolverParams | None = None,
    l0: float = 100.0,
    threads: int = 1,
) -> list[FrontierRow]:
    """One row per penalty level, sorted by decreasing gamma.

    All points share the seed in ``config``, so every strategy (and the constant
    benchmark, which does not depend on gamma and is run once) sees the same paths.
    """
    gammas = [float(g) for g in gammas]
    if not gammas:
        raise AnalyticsError("need at least one gamma")
    if any(not (g > 0 and math.isfinite(g)) for g in gammas):
        raise AnalyticsError("gammas must be positive and finite")
    grid = grid or SolverGrid()
    config = config or SimConfig()
    bench = run_backtest(Strategy.constant(l0), model, config, threads)
    rows = [frontier_point(model, g, grid, config, params, l0, threads, bench) for g in sorted(set(gammas), reverse=True)]
    return rows


def frontier_csv(rows: Iterable[FrontierRow]) -> str:
    lines = [",".join(FRONTIER_COLUMNS)]
    for r in rows:
        lines.append(",".join(repr(float(getattr(r, c))) for c in FRONTIER_COLUMNS))
    return "\n".join(lines) + "\n"


def read_frontier_csv(text: str) -> list[dict[str, float]]:
    rows = [ln.split(",") for ln in text.strip().splitlines()]
    if tuple(rows[0]) != FRONTIER_COLUMNS:
        raise AnalyticsError("not a frontier file")
    return [dict(zip(FRONTIER_COLUMNS, map(float, r))) for r in rows[1:]]


def policy_heatmap_export(policy: PolicyTable, t_slice: float) -> str:
    """Action map of one time slice: rows ``y,i,zone,qb,qa,lb,la,e`` (zone M or T)."""
    grid = policy.grid
    if not 0 <= t_slice <= grid.T:
        raise AnalyticsError(f"slice time {t_slice} outside [0, {grid.T}]")
    k = grid.slice_index(t_slice)
    lines = ["y,i,zone,qb,qa,lb,la,e"]
    ys = grid.y
    for n in range(grid.ny):
        for i in range(grid.m):
            if policy.kind[k, n, i]:
                e = float(policy.e[k, n, i])
                lines.append(f"{_fmt(ys[n])},{i + 1},T,,,,,{_fmt(e)}")
            else:
                qb = ("Bb", "Bb+")[int(policy.qb[k, n, i])]
                qa = ("Ba", "Ba-")[int(policy.qa[k, n, i])]
                lines.append(
                    f"{_fmt(ys[n])},{i + 1},M,{qb},{qa},{_fmt(policy.lb[k, n, i])},{_fmt(policy.la[k, n, i])},0"
                )
    return "\n".join(lines) + "\n"


def read_heatmap_csv(text: str) -> list[dict[str, str]]:
    rows = [ln.split(",") for ln in text.strip().splitlines()]
    head = rows[0]
    return [dict(zip(head, r)) for r in rows[1:]]


def wealth_histogram(values: Sequence[float] | np.ndarray, bins: int = 50) -> str:
    """Equal-width histogram as CSV rows ``left,right,count``."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise AnalyticsError("cannot build a histogram from zero values")
    if not np.all(np.isfinite(x)):
        raise AnalyticsError("histogram input contains non-finite values")
    if bins < 1:
        raise AnalyticsError("bins must be >= 1")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        edges = np.array([lo - 0.5, lo + 0.5])
        counts = np.array([x.size])
    else:
        counts, edges = np.histogram(x, bins=bins, range=(lo, hi))
    lines = ["left,right,count"]
    for a, b, c in zip(edges[:-1], edges[1:], counts):
        lines.append(f"{float(a)!r},{float(b)!r},{int(c)}")
    return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)
