"""Estimation of the spread chain, tick clock and execution intensities from level-1 data."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, NamedTuple, Sequence

import numpy as np

from .model import FeeSchedule, MarketModel, ModelError, PriceModel, SpreadGrid, TickClock

TICK_COLUMNS = ("ts", "bid", "ask", "bid_sz", "ask_sz", "buy_vol", "sell_vol")

OUT_OF_RANGE = 0
GAP = -1
DEFAULT_MAX_GAP = 4 * 3600.0
DEFAULT_V0 = 100.0

BID, ASK = 0, 1


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class TickRecord:
    ts: float
    bid: float
    ask: float
    bid_sz: float
    ask_sz: float
    buy_vol: float = 0.0
    sell_vol: float = 0.0

    def __post_init__(self) -> None:
        if not self.ask > self.bid:
            raise CalibrationError(f"crossed or locked quotes at ts={self.ts}: bid={self.bid} ask={self.ask}")
        if self.buy_vol < 0 or self.sell_vol < 0:
            raise CalibrationError(f"negative traded volume at ts={self.ts}")


class TickArrays(NamedTuple):
    """Columnar view of a tick stream."""

    ts: np.ndarray
    bid: np.ndarray
    ask: np.ndarray
    bid_sz: np.ndarray
    ask_sz: np.ndarray
    buy_vol: np.ndarray
    sell_vol: np.ndarray

    def __len__(self) -> int:  # type: ignore[override]
        return len(self.ts)


def as_arrays(ticks: Sequence[TickRecord] | TickArrays) -> TickArrays:
    if isinstance(ticks, TickArrays):
        arrs = ticks
    else:
        rows = list(ticks)
        arrs = TickArrays(*(np.array([getattr(r, c) for r in rows], dtype=float) for c in TICK_COLUMNS))
    if len(arrs.ts) == 0:
        raise CalibrationError("no tick records")
    if np.any(np.diff(arrs.ts) < 0):
        raise CalibrationError("tick timestamps are not sorted")
    if np.any(arrs.buy_vol < 0) or np.any(arrs.sell_vol < 0):
        raise CalibrationError("traded volumes must be >= 0")
    return arrs


def read_ticks_csv(path: str | Path) -> TickArrays:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CalibrationError(f"{path}: empty file") from None
        if tuple(h.strip() for h in header) != TICK_COLUMNS:
            raise CalibrationError(f"{path}: expected header {','.join(TICK_COLUMNS)}")
        rows = [r for r in reader if r]
    if not rows:
        raise CalibrationError(f"{path}: no tick records")
    try:
        data = np.array(rows, dtype=float)
    except ValueError as exc:
        raise CalibrationError(f"{path}: {exc}") from None
    if data.shape[1] != len(TICK_COLUMNS):
        raise CalibrationError(f"{path}: expected {len(TICK_COLUMNS)} columns")
    return as_arrays(TickArrays(*(np.ascontiguousarray(data[:, k]) for k in range(len(TICK_COLUMNS)))))


def write_ticks_csv(path: str | Path, ticks: TickArrays) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TICK_COLUMNS)
        for row in zip(*(col.tolist() for col in ticks)):
            w.writerow([repr(v) for v in row])


# spread jumps --------------------------------------------------------------------


@dataclass(frozen=True)
class SpreadJumpSeries:
    """Piecewise-constant spread path reconstructed from ticks.

    Piece ``n`` starts at ``starts[n]`` in state ``shat[n]`` (1..m, ``0`` for a
    spread outside the grid, ``-1`` for an unobserved session gap) and starts at
    tick record ``records[n]``. ``theta`` are the change times ``starts[1:]``.
    """

    starts: np.ndarray
    shat: np.ndarray
    records: np.ndarray
    horizon: float
    skipped: int = 0

    @property
    def theta(self) -> np.ndarray:
        return self.starts[1:]

    @property
    def t0(self) -> float:
        return float(self.starts[0])

    @property
    def ends(self) -> np.ndarray:
        return np.append(self.starts[1:], self.horizon)

    def closed_pieces(self) -> np.ndarray:
        """Indices of in-grid pieces that end with an observed spread change."""
        n = len(self.shat)
        idx = np.arange(n - 1)
        ok = (self.shat[:-1] >= 1) & (self.shat[1:] != GAP)
        return idx[ok]

    def observed_windows(self) -> list[tuple[float, float]]:
        """Calendar intervals not covered by a session gap."""
        wins = []
        start = None
        for s, t in zip(self.shat.tolist(), self.starts.tolist()):
            if s == GAP:
                if start is not None and t > start:
                    wins.append((start, t))
                start = None
            elif start is None:
                start = t
        if start is not None and self.horizon > start:
            wins.append((start, self.horizon))
        return wins

    def clock_jump_times(self) -> np.ndarray:
        """Spread-change times that lie inside an observed session."""
        s = self.shat
        ok = (s[1:] != GAP) & (s[:-1] != GAP)
        return self.starts[1:][ok]


def spread_states(ticks: TickArrays, grid: SpreadGrid) -> np.ndarray:
    raw = np.rint((ticks.ask - ticks.bid) / grid.delta).astype(np.int64)
    return np.where((raw >= 1) & (raw <= grid.m) & (ticks.ask > ticks.bid), raw, OUT_OF_RANGE)


def extract_spread_jumps(
    ticks: Sequence[TickRecord] | TickArrays,
    grid: SpreadGrid,
    max_gap: float = DEFAULT_MAX_GAP,
) -> SpreadJumpSeries:
    t = as_arrays(ticks)
    states = spread_states(t, grid)
    n = len(t.ts)
    gap_before = np.zeros(n, dtype=bool)
    gap_before[1:] = np.diff(t.ts) > max_gap
    # A gap piece starts at the last record of the closing session.
    ev_t = [t.ts[:1]]
    ev_s = [states[:1]]
    ev_r = [np.zeros(1, dtype=np.int64)]
    if n > 1:
        k = np.arange(1, n)
        g = gap_before[1:]
        kk = np.repeat(k, np.where(g, 2, 1))
        is_gap = np.zeros(len(kk), dtype=bool)
        is_gap[np.cumsum(np.where(g, 2, 1)) - np.where(g, 2, 1)] = g
        ev_t.append(np.where(is_gap, t.ts[kk - 1], t.ts[kk]))
        ev_s.append(np.where(is_gap, GAP, states[kk]))
        ev_r.append(np.where(is_gap, kk - 1, kk))
    times = np.concatenate(ev_t)
    st = np.concatenate(ev_s)
    rec = np.concatenate(ev_r)
    keep = np.ones(len(st), dtype=bool)
    keep[1:] = st[1:] != st[:-1]
    return SpreadJumpSeries(
        starts=times[keep],
        shat=st[keep].astype(np.int64),
        records=rec[keep],
        horizon=float(t.ts[-1]),
        skipped=int(np.sum(states == OUT_OF_RANGE)),
    )


def series_from_states(states: Sequence[int], starts: Sequence[float] | None = None, horizon: float | None = None) -> SpreadJumpSeries:
    """Build a jump series directly from a chain path (consecutive duplicates merged)."""
    s = np.asarray(states, dtype=np.int64)
    ts = np.arange(len(s), dtype=float) if starts is None else np.asarray(starts, dtype=float)
    keep = np.ones(len(s), dtype=bool)
    keep[1:] = s[1:] != s[:-1]
    hor = float(ts[-1]) if horizon is None else float(horizon)
    return SpreadJumpSeries(starts=ts[keep], shat=s[keep], records=np.flatnonzero(keep), horizon=hor)


# transition matrix ---------------------------------------------------------------------


def transition_counts(series: SpreadJumpSeries | Sequence[SpreadJumpSeries], m: int) -> np.ndarray:
    counts = np.zeros((m, m), dtype=np.int64)
    for s in _as_list(series):
        a, b = s.shat[:-1], s.shat[1:]
        ok = (a >= 1) & (b >= 1)
        np.add.at(counts, (a[ok] - 1, b[ok] - 1), 1)
    return counts


def estimate_transition_matrix(series: SpreadJumpSeries | Sequence[SpreadJumpSeries], m: int) -> np.ndarray:
    """Empirical jump-chain transition frequencies.

    Rows of unvisited states are filled uniformly off the diagonal; find them with
    ``unvisited_states``.
    """
    if m < 2:
        raise CalibrationError("a spread chain needs at least two states")
    counts = transition_counts(series, m)
    if counts.sum() == 0:
        raise CalibrationError("no in-grid spread transitions observed")
    visits = counts.sum(axis=1)
    rho = np.full((m, m), 1.0 / (m - 1))
    seen = visits > 0
    rho[seen] = counts[seen] / visits[seen, None]
    np.fill_diagonal(rho, 0.0)
    return rho


def unvisited_states(series: SpreadJumpSeries | Sequence[SpreadJumpSeries], m: int) -> list[int]:
    visits = transition_counts(series, m).sum(axis=1)
    return [i + 1 for i in range(m) if visits[i] == 0]


# tick clock --------------------------------------------------------------------------------


def _as_list(series):
    return [series] if isinstance(series, SpreadJumpSeries) else list(series)


def _split_periodic(lo: float, hi: float, period: float | None) -> list[tuple[float, float]]:
    if period is None:
        return [(lo, hi)]
    out = []
    while hi > lo:
        base = math.floor(lo / period) * period
        cut = min(hi, base + period)
        out.append((lo - base, cut - base))
        lo = cut
    return out


def estimate_tick_clock(
    series: SpreadJumpSeries | Sequence[SpreadJumpSeries],
    boundaries: Sequence[float],
    period: float | None = None,
) -> np.ndarray:
    """Piecewise-constant clock rates: jumps in each bucket over observed time in it.

    With ``period`` (e.g. 86400) times are folded modulo the period so several
    days accumulate into the same intraday buckets.
    """
    b = np.asarray(boundaries, dtype=float)
    if b.ndim != 1 or len(b) < 2:
        raise CalibrationError("need at least two bucket boundaries")
    if np.any(np.diff(b) <= 0):
        raise CalibrationError("bucket boundaries must be strictly ascending (zero-length bucket)")
    nb = len(b) - 1
    counts = np.zeros(nb)
    exposure = np.zeros(nb)
    for s in _as_list(series):
        jt = s.clock_jump_times()
        if period is not None:
            jt = jt - np.floor(jt / period) * period
        k = np.searchsorted(b, jt, side="right") - 1
        ok = (k >= 0) & (k < nb)
        counts += np.bincount(k[ok], minlength=nb)
        for lo, hi in s.observed_windows():
            for a, c in _split_periodic(lo, hi, period):
                exposure += np.clip(np.minimum(b[1:], c) - np.maximum(b[:-1], a), 0.0, None)
    if np.any(exposure <= 0):
        empty = [k for k in range(nb) if exposure[k] <= 0]
        raise CalibrationError(f"buckets {empty} contain no observed time")
    return counts / exposure


# execution intensities ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExecCounts:
    """Execution counts and exposure, indexed ``[side, quote, i-1]``.

    ``side`` 0 = bid, 1 = ask; ``quote`` 0 = best (Bb/Ba), 1 = improved (Bb+/Ba-).
    """

    counts: np.ndarray
    occupation: np.ndarray

    def __post_init__(self) -> None:
        if self.counts.shape != self.occupation.shape or self.counts.shape[:2] != (2, 2):
            raise CalibrationError("counts and occupation must both be shaped (2, 2, m)")
        if np.any(self.counts < 0) or np.any(self.occupation < 0):
            raise CalibrationError("counts and occupation times must be >= 0")

    @property
    def m(self) -> int:
        return self.counts.shape[2]

    def __add__(self, other: "ExecCounts") -> "ExecCounts":
        return ExecCounts(self.counts + other.counts, self.occupation + other.occupation)


def build_execution_proxies(
    ticks: Sequence[TickRecord] | TickArrays,
    grid: SpreadGrid,
    v0: float = DEFAULT_V0,
    max_gap: float = DEFAULT_MAX_GAP,
    series: SpreadJumpSeries | None = None,
) -> ExecCounts:
    """Proxy execution counts for a small maker updating quotes at spread changes.

    Over each closed spread interval, an improved quote is deemed filled when the
    opposite market-order volume exceeds ``v0``; a best quote when it exceeds
    ``v0`` plus the size queued ahead at the start of the interval.
    """
    if not v0 > 0:
        raise CalibrationError("typical order volume v0 must be positive")
    t = as_arrays(ticks)
    s = extract_spread_jumps(t, grid, max_gap) if series is None else series
    m = grid.m
    counts = np.zeros((2, 2, m), dtype=np.int64)
    occ = np.zeros(m)
    pieces = s.closed_pieces()
    if len(pieces):
        cum_sell = np.concatenate([[0.0], np.cumsum(t.sell_vol)])
        cum_buy = np.concatenate([[0.0], np.cumsum(t.buy_vol)])
        r0 = s.records[pieces]
        r1 = s.records[pieces + 1]
        # volume of records r0+1 .. r1 inclusive
        sell = cum_sell[r1 + 1] - cum_sell[r0 + 1]
        buy = cum_buy[r1 + 1] - cum_buy[r0 + 1]
        i = s.shat[pieces] - 1
        dur = s.starts[pieces + 1] - s.starts[pieces]
        np.add.at(occ, i, dur)
        np.add.at(counts[BID, 1], i, (sell > v0).astype(np.int64))
        np.add.at(counts[BID, 0], i, (sell > v0 + t.bid_sz[r0]).astype(np.int64))
        np.add.at(counts[ASK, 1], i, (buy > v0).astype(np.int64))
        np.add.at(counts[ASK, 0], i, (buy > v0 + t.ask_sz[r0]).astype(np.int64))
    return ExecCounts(counts, np.broadcast_to(occ, (2, 2, m)).copy())


def tally_executions(
    durations: np.ndarray,
    states: np.ndarray,
    qb: np.ndarray,
    qa: np.ndarray,
    n_bid: np.ndarray,
    n_ask: np.ndarray,
    m: int,
) -> ExecCounts:
    """Counts and exposures from directly observed quoting segments.

    Each segment has constant spread ``states`` (1..m) and quotes ``qb``/``qa``
    (0 best, 1 improved) and saw ``n_bid``/``n_ask`` fills.
    """
    i = np.asarray(states, dtype=np.int64) - 1
    if np.any(i < 0) or np.any(i >= m):
        raise CalibrationError("segment spread state outside 1..m")
    counts = np.zeros((2, 2, m), dtype=np.int64)
    occ = np.zeros((2, 2, m))
    qb = np.asarray(qb, dtype=np.int64)
    qa = np.asarray(qa, dtype=np.int64)
    np.add.at(counts[BID], (qb, i), np.asarray(n_bid, dtype=np.int64))
    np.add.at(counts[ASK], (qa, i), np.asarray(n_ask, dtype=np.int64))
    np.add.at(occ[BID], (qb, i), durations)
    np.add.at(occ[ASK], (qa, i), durations)
    return ExecCounts(counts, occ)


def estimate_exec_intensities(counts: ExecCounts) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(bid, ask)`` rate tables shaped (m, 2); NaN where a cell was never occupied."""
    if not np.any(counts.occupation > 0):
        raise CalibrationError("all occupation times are zero")
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(counts.occupation > 0, counts.counts / counts.occupation, np.nan)
    return lam[BID].T.copy(), lam[ASK].T.copy()


def fill_missing(table: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Replace NaN rows by the nearest spread state with data."""
    out = table.copy()
    missing = [i for i in range(len(table)) if np.any(np.isnan(table[i]))]
    have = [i for i in range(len(table)) if not np.any(np.isnan(table[i]))]
    if not have:
        raise CalibrationError("no spread state has execution data")
    for i in missing:
        j = min(have, key=lambda h: (abs(h - i), h))
        out[i] = table[j]
    return out, [i + 1 for i in missing]


def symmetrize(model: MarketModel) -> MarketModel:
    """Average mirrored bid/ask intensities so both sides execute alike."""
    best = (model.exec_bid[:, 0] + model.exec_ask[:, 0]) / 2
    improved = (model.exec_bid[:, 1] + model.exec_ask[:, 1]) / 2
    tab = np.stack([best, improved], axis=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return replace(model, exec_bid=tab.copy(), exec_ask=tab.copy())


# end-to-end ---------------------------------------------------------------------------------------


@dataclass
class CalibrationReport:
    n_records: int
    skipped_records: int
    n_jumps: int
    transition_counts: list[list[int]]
    unvisited_states: list[int]
    clock_boundaries: list[float]
    clock_rates: list[float]
    exec_counts: dict[str, dict[str, list[int]]]
    occupation: list[float]
    missing_exec_states: dict[str, list[int]] = field(default_factory=dict)
    v0: float = DEFAULT_V0

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def calibrate(
    ticks: Sequence[TickRecord] | TickArrays,
    grid: SpreadGrid,
    boundaries: Sequence[float],
    *,
    v0: float = DEFAULT_V0,
    period: float | None = None,
    fees: FeeSchedule = FeeSchedule(),
    sigma: float | None = None,
    max_gap: float = DEFAULT_MAX_GAP,
    symmetric: bool = False,
) -> tuple[MarketModel, CalibrationReport]:
    t = as_arrays(ticks)
    series = extract_spread_jumps(t, grid, max_gap)
    rho = estimate_transition_matrix(series, grid.m)
    rates = estimate_tick_clock(series, boundaries, period=period)
    ec = build_execution_proxies(t, grid, v0, max_gap, series=series)
    lam_b, lam_a = estimate_exec_intensities(ec)
    lam_b, miss_b = fill_missing(lam_b)
    lam_a, miss_a = fill_missing(lam_a)
    mid0 = float((t.bid[0] + t.ask[0]) / 2)
    price = PriceModel("martingale", 0.0, 0.3 * grid.delta if sigma is None else sigma, mid0)
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        model = MarketModel(grid, rho, TickClock(tuple(boundaries), tuple(rates)), lam_b, lam_a, fees, price)
    if symmetric:
        model = symmetrize(model)
    report = CalibrationReport(
        n_records=len(t.ts),
        skipped_records=series.skipped,
        n_jumps=len(series.clock_jump_times()),
        transition_counts=transition_counts(series, grid.m).tolist(),
        unvisited_states=unvisited_states(series, grid.m),
        clock_boundaries=[float(x) for x in boundaries],
        clock_rates=rates.tolist(),
        exec_counts={
            "bid": {"Bb": ec.counts[BID, 0].tolist(), "Bb+": ec.counts[BID, 1].tolist()},
            "ask": {"Ba": ec.counts[ASK, 0].tolist(), "Ba-": ec.counts[ASK, 1].tolist()},
        },
        occupation=ec.occupation[BID, 0].tolist(),
        missing_exec_states={"bid": miss_b, "ask": miss_a},
        v0=v0,
    )
    return model, report


__all__ = [
    "CalibrationError",
    "CalibrationReport",
    "ExecCounts",
    "ModelError",
    "SpreadJumpSeries",
    "TickArrays",
    "TickRecord",
    "as_arrays",
    "build_execution_proxies",
    "calibrate",
    "estimate_exec_intensities",
    "estimate_tick_clock",
    "estimate_transition_matrix",
    "extract_spread_jumps",
    "read_ticks_csv",
    "symmetrize",
    "tally_executions",
    "transition_counts",
    "write_ticks_csv",
]
