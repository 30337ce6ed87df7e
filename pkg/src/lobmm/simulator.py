"""Monte Carlo backtest of market-making strategies on the calibrated market.

Paths are simulated with an Euler scheme of step ``dt``. Every path owns its
random stream, derived from ``(seed, path_index)``, so results do not depend on
batching or thread scheduling, and all strategies see the same spread and price
paths for a given seed.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .model import MakeAction, MarketModel, MarketState, TakeAction, ModelError
from .solver import PolicyTable

# per-step uniforms: bid fill, ask fill, clock tick, spread target, random bid quote, random ask quote
N_UNIFORM = 6
U_BID, U_ASK, U_CLOCK, U_TARGET, U_QB, U_QA = range(N_UNIFORM)

RESULT_FIELDS = ("x_T", "n_bid", "n_ask", "n_market", "max_abs_y", "p_T")


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    T: float = 300.0
    dt: float = 0.3
    n_paths: int = 100_000
    seed: int = 0
    x0: float = 0.0
    y0: float = 0.0
    p0: float = 45.0
    i0: int = 1
    batch: int = 1000

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise SimulationError("dt must be positive")
        if not self.T > 0:
            raise SimulationError("T must be positive")
        if self.n_paths < 1:
            raise SimulationError("n_paths must be >= 1")
        if self.batch < 1:
            raise SimulationError("batch must be >= 1")
        if self.seed < 0:
            raise SimulationError("seed must be a nonnegative integer")

    @property
    def n_steps(self) -> int:
        return max(1, math.ceil(self.T / self.dt - 1e-9))

    def validate(self, model: MarketModel) -> None:
        model.grid.check_state(self.i0)
        worst = max(model.tick_clock.max_rate, float(model.exec_bid.max()), float(model.exec_ask.max()))
        if worst * self.dt > 1:
            raise SimulationError(
                f"dt={self.dt} makes a per-step event probability {worst * self.dt:.3f} exceed 1"
            )


@dataclass(frozen=True)
class Strategy:
    """``policy`` (a solved PolicyTable), ``constant`` or ``random`` with size ``l0``."""

    variant: str
    policy: PolicyTable | None = None
    l0: float = 100.0
    name: str = ""

    def __post_init__(self) -> None:
        if self.variant not in ("policy", "constant", "random"):
            raise SimulationError(f"unknown strategy variant {self.variant!r}")
        if self.variant == "policy" and self.policy is None:
            raise SimulationError("policy strategy needs a PolicyTable")
        if self.l0 < 0:
            raise SimulationError("l0 must be >= 0")

    @classmethod
    def from_policy(cls, policy: PolicyTable, name: str = "optimal") -> "Strategy":
        return cls("policy", policy, name=name)

    @classmethod
    def constant(cls, l0: float = 100.0) -> "Strategy":
        return cls("constant", l0=l0, name="constant")

    @classmethod
    def random(cls, l0: float = 100.0) -> "Strategy":
        return cls("random", l0=l0, name="random")


@dataclass(frozen=True)
class PathResult:
    x_T: float
    n_bid: int
    n_ask: int
    n_market: int
    max_abs_y: float
    p_T: float
    n_clamped: int = 0


@dataclass
class BacktestStats:
    n_paths: int
    mean: dict[str, float]
    std: dict[str, float]
    n_clamped: int = 0
    paths: dict[str, np.ndarray] | None = field(default=None, repr=False)

    @property
    def ir(self) -> float:
        from .analytics import information_ratio

        return information_ratio(self)


# random streams -----------------------------------------------------------------------


def path_stream(seed: int, path_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(path_index,))))


def draw_path_numbers(seed: int, path_index: int, n_steps: int) -> tuple[np.ndarray, np.ndarray]:
    rng = path_stream(seed, path_index)
    u = rng.random((n_steps, N_UNIFORM))
    z = rng.standard_normal(n_steps)
    return u, z


# core kernel ------------------------------------------------------------------------------


@dataclass
class _Batch:
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    i: np.ndarray  # 1-based spread state
    n_bid: np.ndarray
    n_ask: np.ndarray
    n_market: np.ndarray
    max_abs_y: np.ndarray
    n_clamped: np.ndarray

    @classmethod
    def start(cls, n: int, config: SimConfig) -> "_Batch":
        return cls(
            x=np.full(n, float(config.x0)),
            y=np.full(n, float(config.y0)),
            p=np.full(n, float(config.p0)),
            i=np.full(n, int(config.i0), dtype=np.int64),
            n_bid=np.zeros(n, dtype=np.int64),
            n_ask=np.zeros(n, dtype=np.int64),
            n_market=np.zeros(n, dtype=np.int64),
            max_abs_y=np.full(n, abs(float(config.y0))),
            n_clamped=np.zeros(n, dtype=np.int64),
        )


@dataclass
class _Actions:
    take: np.ndarray
    e: np.ndarray
    qb: np.ndarray
    qa: np.ndarray
    lb: np.ndarray
    la: np.ndarray


class _Market:
    """Arrays derived from the model, indexed by 0-based spread state."""

    def __init__(self, model: MarketModel):
        self.model = model
        m = model.m
        self.delta = model.delta
        self.half = np.arange(1, m + 1) * model.delta / 2
        self.lam_b = model.exec_bid
        self.lam_a = model.exec_ask
        cum = np.cumsum(model.rho, axis=1)
        cum[:, -1] = 1.0
        self.cum = cum
        f = model.fees
        self.rebate = f.rebate_per_share
        self.fee = f.take_fee_per_share
        self.eps = f.fixed_fee
        self.b = model.price.b
        self.sigma = model.price.sigma

    def take_cost(self, e: np.ndarray, p: np.ndarray, i: np.ndarray) -> np.ndarray:
        return e * p + np.abs(e) * (self.half[i - 1] + self.fee) + self.eps

    def bid_price(self, qb: np.ndarray, p: np.ndarray, i: np.ndarray) -> np.ndarray:
        return p + (2 * qb - i) * (self.delta / 2) - self.rebate

    def ask_price(self, qa: np.ndarray, p: np.ndarray, i: np.ndarray) -> np.ndarray:
        return p + (i - 2 * qa) * (self.delta / 2) + self.rebate


def _decide(strategy: Strategy, st: _Batch, t: float, u: np.ndarray) -> _Actions:
    n = len(st.y)
    if strategy.variant == "policy":
        pol = strategy.policy
        g = pol.grid
        k = g.slice_index(t)
        node = np.rint((st.y - g.y_min) / g.dy).astype(np.int64)
        clamped = (node < 0) | (node >= g.ny)
        st.n_clamped += clamped
        node = np.clip(node, 0, g.ny - 1)
        ii = st.i - 1
        return _Actions(
            take=pol.kind[k, node, ii].astype(bool),
            e=pol.e[k, node, ii],
            qb=pol.qb[k, node, ii].astype(np.int64),
            qa=pol.qa[k, node, ii].astype(np.int64),
            lb=pol.lb[k, node, ii],
            la=pol.la[k, node, ii],
        )
    wide = st.i > 1
    if strategy.variant == "random":
        qb = np.where(wide & (u[:, U_QB] < 0.5), 1, 0)
        qa = np.where(wide & (u[:, U_QA] < 0.5), 1, 0)
    else:
        qb = np.zeros(n, dtype=np.int64)
        qa = np.zeros(n, dtype=np.int64)
    size = np.full(n, float(strategy.l0))
    return _Actions(np.zeros(n, dtype=bool), np.zeros(n), qb, qa, size, size.copy())


def _advance(
    mk: _Market, st: _Batch, act: _Actions, t: float, dt: float, u: np.ndarray, z: np.ndarray
) -> dict[str, np.ndarray]:
    """One Euler step in place. Returns the fills/trades applied (for tracing)."""
    i = st.i
    # market order at the start of the step preempts limit orders
    take = act.take & (act.e != 0)
    e = np.where(take, act.e, 0.0)
    st.x = st.x - np.where(take, mk.take_cost(e, st.p, i), 0.0)
    st.y = st.y + e
    st.n_market += take
    make = ~take
    fill_b = make & (act.lb > 0) & (u[:, U_BID] < mk.lam_b[i - 1, act.qb] * dt)
    fill_a = make & (act.la > 0) & (u[:, U_ASK] < mk.lam_a[i - 1, act.qa] * dt)
    lb = np.where(fill_b, act.lb, 0.0)
    la = np.where(fill_a, act.la, 0.0)
    pb = mk.bid_price(act.qb, st.p, i)
    pa = mk.ask_price(act.qa, st.p, i)
    st.x = st.x - np.where(fill_b, pb * lb, 0.0) + np.where(fill_a, pa * la, 0.0)
    st.y = st.y + lb - la
    st.n_bid += fill_b
    st.n_ask += fill_a
    st.max_abs_y = np.maximum(st.max_abs_y, np.abs(st.y))
    trace = {"take": e, "bid_fill": lb, "ask_fill": la, "bid_px": pb, "ask_px": pa, "p": st.p.copy(), "i": i.copy()}
    # spread chain subordinated to the tick clock
    jump = u[:, U_CLOCK] < mk.model.tick_clock.rate(t) * dt
    target = (u[:, U_TARGET][:, None] >= mk.cum[i - 1]).sum(axis=1) + 1
    st.i = np.where(jump, np.minimum(target, mk.model.m), i)
    st.p = st.p + mk.b * dt + mk.sigma * math.sqrt(dt) * z
    return trace


def _liquidate(mk: _Market, st: _Batch) -> np.ndarray:
    open_pos = st.y != 0
    cost = mk.take_cost(-st.y, st.p, st.i)
    st.x = st.x - np.where(open_pos, cost, 0.0)
    st.n_market += open_pos
    liq = st.y.copy()
    st.y = np.zeros_like(st.y)
    return liq


def _simulate_batch(
    strategy: Strategy, model: MarketModel, config: SimConfig, path_indices: Sequence[int]
) -> dict[str, np.ndarray]:
    mk = _Market(model)
    n_steps = config.n_steps
    draws = [draw_path_numbers(config.seed, int(k), n_steps) for k in path_indices]
    U = np.stack([d[0] for d in draws], axis=1)  # (steps, paths, N_UNIFORM)
    Z = np.stack([d[1] for d in draws], axis=1)
    st = _Batch.start(len(path_indices), config)
    for s in range(n_steps):
        t = s * config.dt
        act = _decide(strategy, st, t, U[s])
        _advance(mk, st, act, t, config.dt, U[s], Z[s])
    p_T = st.p.copy()
    _liquidate(mk, st)
    return {
        "x_T": st.x,
        "n_bid": st.n_bid,
        "n_ask": st.n_ask,
        "n_market": st.n_market,
        "max_abs_y": st.max_abs_y,
        "p_T": p_T,
        "n_clamped": st.n_clamped,
    }


# public API ------------------------------------------------------------------------------------


def step(
    state: MarketState,
    action: MakeAction | TakeAction,
    model: MarketModel,
    dt: float,
    rng: np.random.Generator,
) -> MarketState:
    """Advance a single state by one Euler step using draws from ``rng``."""
    model.grid.check_state(state.i)
    u = rng.random((1, N_UNIFORM))
    z = rng.standard_normal(1)
    return _step_with(state, action, model, dt, u, z)


def _step_with(state, action, model, dt, u, z) -> MarketState:
    mk = _Market(model)
    st = _Batch(
        x=np.array([state.x], dtype=float),
        y=np.array([state.y], dtype=float),
        p=np.array([state.p], dtype=float),
        i=np.array([state.i], dtype=np.int64),
        n_bid=np.zeros(1, dtype=np.int64),
        n_ask=np.zeros(1, dtype=np.int64),
        n_market=np.zeros(1, dtype=np.int64),
        max_abs_y=np.array([abs(state.y)]),
        n_clamped=np.zeros(1, dtype=np.int64),
    )
    if isinstance(action, TakeAction):
        act = _Actions(np.array([True]), np.array([float(action.e)]), np.zeros(1, int), np.zeros(1, int), np.zeros(1), np.zeros(1))
    else:
        if state.i == 1 and (action.qb or action.qa):
            raise ModelError("improved quotes are not admissible at a one-tick spread")
        act = _Actions(
            np.array([False]),
            np.zeros(1),
            np.array([int(action.qb)]),
            np.array([int(action.qa)]),
            np.array([float(action.lb)]),
            np.array([float(action.la)]),
        )
    _advance(mk, st, act, state.t, dt, u, z)
    return MarketState(float(st.x[0]), float(st.y[0]), float(st.p[0]), int(st.i[0]), state.t + dt)


def run_path(strategy: Strategy, model: MarketModel, config: SimConfig, path_index: int) -> PathResult:
    config.validate(model)
    r = _simulate_batch(strategy, model, config, [path_index])
    return PathResult(
        x_T=float(r["x_T"][0]),
        n_bid=int(r["n_bid"][0]),
        n_ask=int(r["n_ask"][0]),
        n_market=int(r["n_market"][0]),
        max_abs_y=float(r["max_abs_y"][0]),
        p_T=float(r["p_T"][0]),
        n_clamped=int(r["n_clamped"][0]),
    )


def trace_path(strategy: Strategy, model: MarketModel, config: SimConfig, path_index: int) -> dict[str, Any]:
    """Per-step event log of one path, for audits of the cash/inventory accounting."""
    config.validate(model)
    mk = _Market(model)
    u_all, z_all = draw_path_numbers(config.seed, path_index, config.n_steps)
    st = _Batch.start(1, config)
    events = []
    for s in range(config.n_steps):
        t = s * config.dt
        act = _decide(strategy, st, t, u_all[s : s + 1])
        tr = _advance(mk, st, act, t, config.dt, u_all[s : s + 1], z_all[s : s + 1])
        events.append({k: (v[0].item() if isinstance(v, np.ndarray) else v) for k, v in tr.items()})
    p_T, i_T = float(st.p[0]), int(st.i[0])
    y_before = float(st.y[0])
    _liquidate(mk, st)
    return {
        "events": events,
        "y_T": y_before,
        "p_T": p_T,
        "i_T": i_T,
        "x_T": float(st.x[0]),
        "n_market": int(st.n_market[0]),
    }


def simulate_paths(
    strategy: Strategy, model: MarketModel, config: SimConfig, threads: int = 1
) -> dict[str, np.ndarray]:
    """Per-path results for all ``config.n_paths`` paths, in path order."""
    config.validate(model)
    chunks = [range(a, min(a + config.batch, config.n_paths)) for a in range(0, config.n_paths, config.batch)]
    if threads <= 1 or len(chunks) == 1:
        parts = [_simulate_batch(strategy, model, config, c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda c: _simulate_batch(strategy, model, config, c), chunks))
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def summarize(paths: dict[str, np.ndarray], keep_paths: bool = False) -> BacktestStats:
    n = len(paths["x_T"])
    mean = {f: float(np.mean(paths[f])) for f in RESULT_FIELDS}
    std = {f: float(np.std(paths[f])) for f in RESULT_FIELDS}
    return BacktestStats(n, mean, std, int(paths["n_clamped"].sum()), paths if keep_paths else None)


def run_backtest(
    strategy: Strategy, model: MarketModel, config: SimConfig, threads: int = 1, keep_paths: bool = False
) -> BacktestStats:
    return summarize(simulate_paths(strategy, model, config, threads), keep_paths)


TABLE_ROWS = (
    ("ir", None),
    ("mean_x_T", ("mean", "x_T")),
    ("std_x_T", ("std", "x_T")),
    ("mean_n_bid", ("mean", "n_bid")),
    ("std_n_bid", ("std", "n_bid")),
    ("mean_n_ask", ("mean", "n_ask")),
    ("std_n_ask", ("std", "n_ask")),
    ("mean_n_market", ("mean", "n_market")),
    ("std_n_market", ("std", "n_market")),
    ("mean_max_abs_y", ("mean", "max_abs_y")),
    ("std_max_abs_y", ("std", "max_abs_y")),
)


def benchmark_suite(
    policy_star: PolicyTable,
    policy_womo: PolicyTable,
    model: MarketModel,
    config: SimConfig,
    l0: float = 100.0,
    threads: int = 1,
    keep_paths: bool = False,
) -> dict[str, BacktestStats]:
    """Backtest the optimal, no-market-order, constant and random strategies on common seeds."""
    if policy_womo.has_take:
        raise SimulationError("the WoMO policy must not contain market orders (solve with ebar=0)")
    strategies = {
        "optimal": Strategy.from_policy(policy_star, "optimal"),
        "womo": Strategy.from_policy(policy_womo, "womo"),
        "constant": Strategy.constant(l0),
        "random": Strategy.random(l0),
    }
    return {k: run_backtest(s, model, config, threads, keep_paths) for k, s in strategies.items()}


def stats_table_csv(results: dict[str, BacktestStats]) -> str:
    """Table-5 style layout: one row per statistic, one column per strategy."""
    names = list(results)
    lines = ["statistic," + ",".join(names)]
    for row, src in TABLE_ROWS:
        vals = []
        for n in names:
            s = results[n]
            if src is None:
                v = s.ir if s.std["x_T"] > 0 else float("nan")
            else:
                v = getattr(s, src[0])[src[1]]
            vals.append(repr(float(v)))
        lines.append(row + "," + ",".join(vals))
    return "\n".join(lines) + "\n"


def per_path_csv(paths: dict[str, np.ndarray]) -> str:
    lines = ["path,x_T,n_bid,n_ask,n_market,max_abs_y"]
    cols = [paths[k].tolist() for k in ("x_T", "n_bid", "n_ask", "n_market", "max_abs_y")]
    for k, row in enumerate(zip(*cols)):
        lines.append(f"{k}," + ",".join(repr(v) for v in row))
    return "\n".join(lines) + "\n"


def read_per_path_csv(text: str) -> dict[str, np.ndarray]:
    rows = [ln.split(",") for ln in text.strip().splitlines()]
    head = rows[0]
    if head[:2] != ["path", "x_T"]:
        raise SimulationError("not a per-path result file")
    data = np.array(rows[1:], dtype=float).reshape(-1, len(head))
    return {h: data[:, k] for k, h in enumerate(head)}
