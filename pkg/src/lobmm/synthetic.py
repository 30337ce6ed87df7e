"""Synthetic data generators with known parameters, for estimator round trips."""

from __future__ import annotations

import numpy as np

from .calibration import TickArrays
from .model import MarketModel, TickClock


def simulate_jump_chain(rho: np.ndarray, n_transitions: int, rng: np.random.Generator, i0: int = 1) -> np.ndarray:
    """Path of the embedded spread chain (1-based states), ``n_transitions + 1`` long."""
    cum = np.cumsum(np.asarray(rho, dtype=float), axis=1)
    cum[:, -1] = 1.0
    rows = [list(r) for r in cum]
    u = rng.random(n_transitions).tolist()
    out = np.empty(n_transitions + 1, dtype=np.int64)
    i = i0 - 1
    out[0] = i0
    # searchsorted on short python lists beats numpy per-call overhead here
    for n, un in enumerate(u, start=1):
        row = rows[i]
        j = 0
        while row[j] <= un:
            j += 1
        i = j
        out[n] = j + 1
    return out


def simulate_clock_times(clock: TickClock, t0: float, t1: float, rng: np.random.Generator) -> np.ndarray:
    """Event times of the piecewise-constant Poisson clock on ``[t0, t1)``."""
    b = np.asarray(clock.boundaries)
    edges = np.unique(np.clip(np.concatenate([[t0], b, [t1]]), t0, t1))
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        rate = clock.rate(lo)
        n = rng.poisson(rate * (hi - lo))
        out.append(np.sort(rng.uniform(lo, hi, n)))
    return np.concatenate(out) if out else np.empty(0)


def simulate_spread_path(
    model: MarketModel, t0: float, t1: float, rng: np.random.Generator, i0: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Calendar-time spread path: (piece start times, states), first piece at ``t0``."""
    times = simulate_clock_times(model.tick_clock, t0, t1, rng)
    states = simulate_jump_chain(model.rho, len(times), rng, i0)
    return np.concatenate([[t0], times]), states


def simulate_ticks(
    model: MarketModel,
    rng: np.random.Generator,
    days: int = 1,
    session: tuple[float, float] = (34200.0, 59400.0),
    day_length: float = 86400.0,
    mid: float = 45.0,
    extra_records: float = 1.0,
    size_scale: float = 300.0,
    flow_scale: float = 150.0,
) -> TickArrays:
    """Level-1 records emitted at every spread change plus Poisson filler records.

    Market-order volume arrives as exponential-size trades on filler records, so
    the proxy counts are nondegenerate; they are not a sample of a known Cox model.
    """
    cols: list[list[np.ndarray]] = [[] for _ in range(7)]
    for d in range(days):
        # the clock is defined on intraday time; shift each day afterwards
        offset = d * day_length
        t0 = offset + session[0]
        t1 = offset + session[1]
        starts, states = simulate_spread_path(model, session[0], session[1], rng, i0=1)
        starts = starts + offset
        n_fill = rng.poisson(extra_records * (t1 - t0))
        fill_t = np.sort(rng.uniform(t0, t1, n_fill))
        ts = np.concatenate([starts, fill_t])
        order = np.argsort(ts, kind="stable")
        ts = ts[order]
        piece = np.searchsorted(starts, ts, side="right") - 1
        spread = states[piece] * model.delta
        n = len(ts)
        cols[0].append(ts)
        cols[1].append(mid - spread / 2)
        cols[2].append(mid + spread / 2)
        cols[3].append(np.round(rng.exponential(size_scale, n)))
        cols[4].append(np.round(rng.exponential(size_scale, n)))
        is_fill = order >= len(starts)
        cols[5].append(np.where(is_fill & (rng.random(n) < 0.3), np.round(rng.exponential(flow_scale, n)), 0.0))
        cols[6].append(np.where(is_fill & (rng.random(n) < 0.3), np.round(rng.exponential(flow_scale, n)), 0.0))
    return TickArrays(*(np.concatenate(c) for c in cols))


def simulate_quoted_executions(
    model: MarketModel,
    horizon: float,
    rng: np.random.Generator,
    requote: float = 5.0,
    i0: int = 1,
) -> tuple[np.ndarray, ...]:
    """Random quoting against Cox executions at the model's rates.

    Quotes are redrawn uniformly among admissible pairs at every spread change and
    every ``requote`` seconds. Returns per-segment
    ``(durations, states, qb, qa, n_bid, n_ask)``.
    """
    starts, states = simulate_spread_path(model, 0.0, horizon, rng, i0)
    grid_t = np.arange(0.0, horizon, requote)
    cuts = np.union1d(starts, grid_t)
    ends = np.append(cuts[1:], horizon)
    seg_state = states[np.searchsorted(starts, cuts, side="right") - 1]
    n = len(cuts)
    improved = seg_state > 1
    qb = np.where(improved, rng.integers(0, 2, n), 0)
    qa = np.where(improved, rng.integers(0, 2, n), 0)
    dur = ends - cuts
    lam_b = model.exec_bid[seg_state - 1, qb]
    lam_a = model.exec_ask[seg_state - 1, qa]
    n_bid = rng.poisson(lam_b * dur)
    n_ask = rng.poisson(lam_a * dur)
    return dur, seg_state, qb, qa, n_bid, n_ask
