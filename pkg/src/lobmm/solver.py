"""Backward finite-difference solver for the reduced market-making QVI systems.

Two objectives are supported:

* ``mean_penalty``: expected terminal wealth minus ``gamma * int (y/u)^2 dt``
  where ``u`` is the inventory unit (1000 shares by default). The
  value is ``x + y p + phi_i(t, y)`` and only ``phi`` is solved for.
* ``exponential``: CARA utility with a Bachelier mid price. The value is
  ``-exp(-eta (x + y p)) * phi_i(t, y)`` with ``phi > 0`` (smaller is better).

The scheme is explicit in time with automatic substepping so that every node
update is a convex combination of neighbouring values (monotone). After each
substep the market-order obstacle is iterated to its fixed point.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .model import MakeAction, MarketModel, QuoteAsk, QuoteBid, TakeAction

MAX_EXPONENT = 700.0
POSITIVE_FLOOR = 1e-300


class SolverError(ValueError):
    pass


@dataclass(frozen=True)
class SolverGrid:
    T: float = 300.0
    n_out: int = 100
    y_min: float = -1000.0
    y_max: float = 1000.0
    dy: float = 10.0
    m: int = 6

    def __post_init__(self) -> None:
        if not self.T > 0:
            raise SolverError("horizon T must be positive")
        if int(self.n_out) != self.n_out or self.n_out < 1:
            raise SolverError("n_out must be a positive integer")
        if not (self.y_min < 0 < self.y_max):
            raise SolverError("inventory range must straddle zero (y_min < 0 < y_max)")
        if not self.dy > 0:
            raise SolverError("dy must be positive")
        for v in (self.y_min, self.y_max):
            if not _is_multiple(v, self.dy):
                raise SolverError(f"inventory bound {v} is not a multiple of dy={self.dy}")

    @property
    def ny(self) -> int:
        return int(round((self.y_max - self.y_min) / self.dy)) + 1

    @property
    def y(self) -> np.ndarray:
        return self.y_min + self.dy * np.arange(self.ny)

    @property
    def dt_out(self) -> float:
        return self.T / self.n_out

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_out + 1) * self.dt_out

    def node(self, y: float) -> int:
        return int(round((y - self.y_min) / self.dy))

    def slice_index(self, t: float) -> int:
        k = int(math.floor(t / self.dt_out + 1e-9))
        return min(max(k, 0), self.n_out - 1)


@dataclass(frozen=True)
class SolverParams:
    objective: str = "mean_penalty"
    gamma: float = 5.0
    penalty: str = "quadratic"
    lbar: float = 100.0
    ebar: float = 100.0
    eta: float = 0.0
    b: float = 0.0
    sigma: float = 0.0
    tie_eps: float = 1e-10
    cfl: float = 0.5
    # shares per penalty unit: the running penalty is gamma * (y / inventory_unit)^2
    inventory_unit: float = 1000.0

    def __post_init__(self) -> None:
        if self.objective not in ("mean_penalty", "exponential"):
            raise SolverError(f"unknown objective {self.objective!r}")
        if self.penalty != "quadratic":
            raise SolverError("only the quadratic inventory penalty is implemented")
        if self.gamma < 0:
            raise SolverError("gamma must be >= 0")
        if self.lbar < 0 or self.ebar < 0:
            raise SolverError("order size limits must be >= 0")
        if self.objective == "exponential":
            if not self.eta > 0:
                raise SolverError("exponential objective needs eta > 0")
            if self.gamma != 0:
                raise SolverError("exponential objective requires gamma = 0")
            if self.sigma < 0:
                raise SolverError("sigma must be >= 0")
        if not 0 < self.cfl <= 1:
            raise SolverError("cfl must lie in (0, 1]")
        if not self.inventory_unit > 0:
            raise SolverError("inventory_unit must be positive")


@dataclass
class ValueSurface:
    """Stored value slices ``values[k, y_node, i-1]`` at ``times[k]``.

    ``basis[k]`` is the value one substep after ``times[k]`` (what the limit-order
    choice at ``times[k]`` is optimized against) and ``continuation[k]`` the value
    at ``times[k]`` before market orders are allowed.
    """

    objective: str
    times: np.ndarray
    y: np.ndarray
    values: np.ndarray
    basis: np.ndarray
    continuation: np.ndarray
    dtau: float
    substeps: int
    floor_hits: int = 0

    def to_csv(self) -> str:
        lines = ["t,y,i,value"]
        nt, ny, m = self.values.shape
        for k in range(nt):
            for n in range(ny):
                for i in range(m):
                    lines.append(f"{self.times[k]!r},{self.y[n]!r},{i + 1},{self.values[k, n, i]!r}")
        return "\n".join(lines) + "\n"


@dataclass
class PolicyTable:
    """Optimal action per (time slice, inventory node, spread state).

    ``kind`` is 0 for a limit-order (make) action and 1 for a market order. Make
    fields are filled everywhere; ``e`` is 0 in the make zone.
    """

    grid: SolverGrid
    kind: np.ndarray
    qb: np.ndarray
    qa: np.ndarray
    lb: np.ndarray
    la: np.ndarray
    e: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    def action(self, k: int, n: int, i: int) -> MakeAction | TakeAction:
        if self.kind[k, n, i - 1]:
            return TakeAction(float(self.e[k, n, i - 1]))
        return MakeAction(
            QuoteBid(int(self.qb[k, n, i - 1])),
            QuoteAsk(int(self.qa[k, n, i - 1])),
            float(self.lb[k, n, i - 1]),
            float(self.la[k, n, i - 1]),
        )

    @property
    def has_take(self) -> bool:
        return bool(np.any(self.kind))

    def mirrored(self) -> "PolicyTable":
        """Policy with y -> -y and bid/ask exchanged."""
        return PolicyTable(
            self.grid,
            self.kind[:, ::-1].copy(),
            self.qa[:, ::-1].copy(),
            self.qb[:, ::-1].copy(),
            self.la[:, ::-1].copy(),
            self.lb[:, ::-1].copy(),
            -self.e[:, ::-1],
            dict(self.meta),
        )

    def same_actions(self, other: "PolicyTable") -> bool:
        """Exact equality of the actions (make fields compared only in the make zone)."""
        if not np.array_equal(self.kind, other.kind):
            return False
        mk = self.kind == 0
        return (
            np.array_equal(self.e[~mk], other.e[~mk])
            and all(np.array_equal(getattr(self, f)[mk], getattr(other, f)[mk]) for f in ("qb", "qa", "lb", "la"))
        )

    def to_dict(self) -> dict[str, Any]:
        actions = []
        kind = self.kind.ravel().tolist()
        qb = self.qb.ravel().tolist()
        qa = self.qa.ravel().tolist()
        lb = self.lb.ravel().tolist()
        la = self.la.ravel().tolist()
        e = self.e.ravel().tolist()
        for n in range(len(kind)):
            if kind[n]:
                actions.append({"type": "take", "e": _num(e[n])})
            else:
                actions.append(
                    {
                        "type": "make",
                        "qb": ("Bb", "Bb+")[qb[n]],
                        "qa": ("Ba", "Ba-")[qa[n]],
                        "lb": _num(lb[n]),
                        "la": _num(la[n]),
                    }
                )
        return {"grid": asdict(self.grid), "meta": self.meta, "layout": "t,y,i", "actions": actions}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PolicyTable":
        try:
            grid = SolverGrid(**d["grid"])
            acts = d["actions"]
        except (KeyError, TypeError) as exc:
            raise SolverError(f"malformed policy file: {exc}") from None
        shape = (grid.n_out, grid.ny, grid.m)
        if len(acts) != int(np.prod(shape)):
            raise SolverError(f"policy has {len(acts)} actions, grid needs {int(np.prod(shape))}")
        kind = np.zeros(len(acts), dtype=np.int8)
        qb = np.zeros(len(acts), dtype=np.int8)
        qa = np.zeros(len(acts), dtype=np.int8)
        lb = np.zeros(len(acts))
        la = np.zeros(len(acts))
        e = np.zeros(len(acts))
        for n, a in enumerate(acts):
            if a.get("type") == "take":
                kind[n] = 1
                e[n] = a["e"]
            elif a.get("type") == "make":
                qb[n] = ("Bb", "Bb+").index(a["qb"])
                qa[n] = ("Ba", "Ba-").index(a["qa"])
                lb[n] = a["lb"]
                la[n] = a["la"]
            else:
                raise SolverError(f"unknown action type in policy file: {a!r}")
        r = lambda v: v.reshape(shape)  # noqa: E731
        return cls(grid, r(kind), r(qb), r(qa), r(lb), r(la), r(e), dict(d.get("meta", {})))

    @classmethod
    def from_json(cls, text: str) -> "PolicyTable":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise SolverError(f"policy file is not valid JSON: {exc}") from None


def _num(v: float) -> float | int:
    return int(v) if float(v).is_integer() else v


def _is_multiple(v: float, step: float) -> bool:
    r = v / step
    return abs(r - round(r)) < 1e-9


# discrete operators ---------------------------------------------------------------


class _Operators:
    """Precomputed index/gain tables shared by all substeps of a solve."""

    def __init__(self, model: MarketModel, grid: SolverGrid, params: SolverParams):
        if grid.m != model.m:
            raise SolverError(f"solver grid has m={grid.m} but model has m={model.m}")
        for name, v in (("lbar", params.lbar), ("ebar", params.ebar)):
            if not _is_multiple(v, grid.dy):
                raise SolverError(f"{name}={v} is not a multiple of dy={grid.dy}")
        if params.lbar >= grid.y_max - grid.y_min:
            raise SolverError("inventory range must exceed the maximal limit-order size")
        self.grid = grid
        self.params = params
        self.exp = params.objective == "exponential"
        ny, m = grid.ny, grid.m
        delta = model.delta
        fees = model.fees
        self.y = grid.y
        half = np.arange(1, m + 1) * delta / 2

        nl = int(round(params.lbar / grid.dy))
        self.sizes = np.arange(nl + 1) * grid.dy
        # make options flattened as (quote, size); quote-major so both sides share order
        q = np.repeat([0, 1], nl + 1)
        k = np.tile(np.arange(nl + 1), 2)
        self.opt_q = q
        self.opt_k = k
        self.opt_l = self.sizes[k]
        nodes = np.arange(ny)
        up = nodes[None, :] + k[:, None]
        dn = nodes[None, :] - k[:, None]
        self.up_idx = np.clip(up, 0, ny - 1)
        self.dn_idx = np.clip(dn, 0, ny - 1)
        admissible = np.ones((len(q), m), dtype=bool)
        admissible[q == 1, 0] = False
        self.up_ok = (up < ny)[:, :, None] & admissible[:, None, :]
        self.dn_ok = (dn >= 0)[:, :, None] & admissible[:, None, :]
        # per (option, state): intensity and per-share margin
        margin = half[None, :] - delta * q[:, None] + fees.rebate_per_share
        self.lam_b = model.exec_bid.T[q]
        self.lam_a = model.exec_ask.T[q]
        self.gain = (margin * self.opt_l[:, None])[:, None, :]

        ne = int(round(params.ebar / grid.dy))
        steps = np.arange(1, ne + 1)
        # candidate order: -1, +1, -2, +2, ... (ties resolved separately)
        self.take_k = np.ravel(np.column_stack([-steps, steps])) if ne else np.zeros(0, dtype=int)
        self.take_e = self.take_k * grid.dy
        tgt = nodes[None, :] + self.take_k[:, None]
        self.n_take = ne
        self.take_idx = np.clip(tgt, 0, ny - 1)
        self.take_ok = (tgt >= 0) & (tgt < ny)
        cost = np.abs(self.take_e)[:, None] * (half[None, :] + fees.take_fee_per_share) + fees.fixed_fee
        self.take_cost = cost[:, None, :]
        # tie-break rank: smaller |e| first, then the side that reduces |y|
        toward_zero = (self.take_e[:, None] * self.y[None, :] < 0) | (
            (self.y[None, :] == 0) & (self.take_e[:, None] < 0)
        )
        self.take_rank = (2 * np.abs(self.take_k)[:, None] + np.where(toward_zero, 0, 1))[:, :, None]

        self.rho = model.rho
        self.clock = model.tick_clock
        self.penalty = (params.gamma * (self.y / params.inventory_unit) ** 2)[:, None]
        if self.exp:
            eta = params.eta
            worst = eta * max(abs(grid.y_min), abs(grid.y_max)) * (m * delta / 2)
            worst_take = eta * (params.ebar * (m * delta / 2 + fees.take_fee_per_share) + fees.fixed_fee)
            if worst + worst_take > MAX_EXPONENT:
                raise SolverError(
                    f"eta * |y| * spread exponent {worst + worst_take:.1f} exceeds {MAX_EXPONENT}; "
                    "shrink eta or the inventory range"
                )
            self.potential = (params.b * eta * self.y - 0.5 * params.sigma**2 * (eta * self.y) ** 2)[:, None]
            self.make_factor = np.exp(-eta * self.gain)
            self.take_factor = np.exp(eta * self.take_cost)
            self.half = half

        rate = self.clock.max_rate * self.rho.sum(axis=1) + model.exec_bid.max(axis=1) + model.exec_ask.max(axis=1)
        max_rate = float(np.max(rate))
        if self.exp:
            max_rate += float(np.max(np.abs(self.potential)))
        self.substeps = max(1, math.ceil(grid.dt_out * max_rate / params.cfl - 1e-12))
        self.dtau = grid.dt_out / self.substeps

    # -- mean criterion

    def spread_term(self, v: np.ndarray, t: float) -> np.ndarray:
        r = self.clock.rate(t) * self.rho
        acc = np.zeros_like(v)
        for j in range(v.shape[1]):
            acc += r[:, j][None, :] * (v[:, [j]] - v)
        return acc

    def make_candidates(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-option bid and ask terms, shaped (option, y, i); infeasible = +-inf."""
        if self.exp:
            bid = self.lam_b[:, None, :] * (self.make_factor * v[self.up_idx, :] - v[None])
            ask = self.lam_a[:, None, :] * (self.make_factor * v[self.dn_idx, :] - v[None])
            bad = np.inf
        else:
            bid = self.lam_b[:, None, :] * (v[self.up_idx, :] - v[None] + self.gain)
            ask = self.lam_a[:, None, :] * (v[self.dn_idx, :] - v[None] + self.gain)
            bad = -np.inf
        return np.where(self.up_ok, bid, bad), np.where(self.dn_ok, ask, bad)

    def continuation(self, v: np.ndarray, t: float) -> np.ndarray:
        bid, ask = self.make_candidates(v)
        if self.exp:
            h = self.spread_term(v, t) + (bid.min(axis=0) + ask.min(axis=0)) - self.potential * v
            out = v + self.dtau * h
            return out
        h = self.spread_term(v, t) + (bid.max(axis=0) + ask.max(axis=0)) - self.penalty
        return v + self.dtau * h

    def take_candidates(self, v: np.ndarray) -> np.ndarray:
        if self.exp:
            c = self.take_factor * v[self.take_idx, :]
            return np.where(self.take_ok[:, :, None], c, np.inf)
        c = v[self.take_idx, :] - self.take_cost
        return np.where(self.take_ok[:, :, None], c, -np.inf)

    def intervention_value(self, v: np.ndarray) -> np.ndarray:
        """Best market-order value only (no argmax), via shifted slices."""
        ny = v.shape[0]
        ne = self.n_take
        fill = np.inf if self.exp else -np.inf
        pad = np.full((ny + 2 * ne, v.shape[1]), fill)
        pad[ne : ne + ny] = v
        best = np.full_like(v, fill)
        for n, k in enumerate(self.take_k):
            shifted = pad[ne + k : ne + k + ny]
            if self.exp:
                np.minimum(best, self.take_factor[n] * shifted, out=best)
            else:
                np.maximum(best, shifted - self.take_cost[n], out=best)
        return best

    def intervention(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Best market-order value and its size per node (size 0 if none feasible)."""
        ny, m = v.shape
        if len(self.take_e) == 0:
            fill = np.inf if self.exp else -np.inf
            return np.full((ny, m), fill), np.zeros((ny, m))
        c = self.take_candidates(v)
        best = c.min(axis=0) if self.exp else c.max(axis=0)
        tied = (c == best[None]) & np.isfinite(c)
        rank = np.where(tied, self.take_rank, np.iinfo(np.int64).max)
        arg = rank.argmin(axis=0)
        e = np.where(np.isfinite(best), self.take_e[arg], 0.0)
        return best, e

    def apply_obstacle(self, v: np.ndarray) -> np.ndarray:
        if len(self.take_e) == 0:
            return v
        for _ in range(2 * self.grid.ny + 2):
            best = self.intervention_value(v)
            new = np.minimum(v, best) if self.exp else np.maximum(v, best)
            if np.array_equal(new, v):
                return v
            v = new
        raise SolverError("market-order obstacle iteration did not converge")


def terminal_values(model: MarketModel, grid: SolverGrid, params: SolverParams) -> np.ndarray:
    """Analytic terminal slice: ``-|y| i delta/2 - eps`` or ``exp(eta |y| i delta/2)``."""
    half = np.arange(1, grid.m + 1) * model.delta / 2
    ay = np.abs(grid.y)[:, None]
    if params.objective == "exponential":
        return np.exp(params.eta * ay * half[None, :])
    return -ay * half[None, :] - model.fees.fixed_fee


def _solve(model: MarketModel, grid: SolverGrid, params: SolverParams) -> tuple[ValueSurface, PolicyTable]:
    ops = _Operators(model, grid, params)
    ny, m, n_out = grid.ny, grid.m, grid.n_out
    values = np.empty((n_out + 1, ny, m))
    basis = np.empty((n_out, ny, m))
    cont = np.empty((n_out, ny, m))
    v = terminal_values(model, grid, params)
    values[n_out] = v
    floor_hits = 0
    times = grid.times
    for k in range(n_out - 1, -1, -1):
        for s in range(ops.substeps):
            t_hi = times[k + 1] - s * ops.dtau
            prev = v
            c = ops.continuation(v, t_hi - ops.dtau / 2)
            if ops.exp:
                low = c < POSITIVE_FLOOR
                if np.any(low):
                    floor_hits += int(low.sum())
                    c = np.where(low, POSITIVE_FLOOR, c)
            v = ops.apply_obstacle(c)
        basis[k] = prev
        cont[k] = c
        values[k] = v
    surface = ValueSurface(params.objective, times, grid.y, values, basis, cont, ops.dtau, ops.substeps, floor_hits)
    return surface, extract_policy(surface, model, grid, params, _ops=ops)


def solve_mean_criterion(model: MarketModel, grid: SolverGrid, params: SolverParams) -> tuple[ValueSurface, PolicyTable]:
    if params.objective != "mean_penalty":
        raise SolverError("solve_mean_criterion needs objective='mean_penalty'")
    return _solve(model, grid, params)


def solve_exponential(model: MarketModel, grid: SolverGrid, params: SolverParams) -> tuple[ValueSurface, PolicyTable]:
    if params.objective != "exponential":
        raise SolverError("solve_exponential needs objective='exponential'")
    return _solve(model, grid, params)


def solve(model: MarketModel, grid: SolverGrid, params: SolverParams) -> tuple[ValueSurface, PolicyTable]:
    return _solve(model, grid, params)


def intervention_operator(
    values: np.ndarray, model: MarketModel, grid: SolverGrid, params: SolverParams
) -> tuple[np.ndarray, np.ndarray]:
    """Market-order operator on one time slice ``values[y_node, i-1]``.

    Returns the best post-trade value (max for the mean criterion, min for the
    exponential one) and the maximizing signed size; zero-size trades are never
    candidates.
    """
    ops = _Operators(model, grid, params)
    return ops.intervention(np.asarray(values, dtype=float))


def extract_policy(
    surface: ValueSurface,
    model: MarketModel,
    grid: SolverGrid,
    params: SolverParams,
    _ops: _Operators | None = None,
) -> PolicyTable:
    ops = _Operators(model, grid, params) if _ops is None else _ops
    n_out, ny, m = surface.basis.shape
    shape = (n_out, ny, m)
    kind = np.zeros(shape, dtype=np.int8)
    qb = np.zeros(shape, dtype=np.int8)
    qa = np.zeros(shape, dtype=np.int8)
    lb = np.zeros(shape)
    la = np.zeros(shape)
    e = np.zeros(shape)
    for k in range(n_out):
        bid, ask = ops.make_candidates(surface.basis[k])
        ib = bid.argmin(axis=0) if ops.exp else bid.argmax(axis=0)
        ia = ask.argmin(axis=0) if ops.exp else ask.argmax(axis=0)
        qb[k] = ops.opt_q[ib]
        qa[k] = ops.opt_q[ia]
        lb[k] = ops.opt_l[ib]
        la[k] = ops.opt_l[ia]
        v = surface.values[k]
        c = surface.continuation[k]
        if ops.exp:
            take = c - v > params.tie_eps * np.abs(c)
        else:
            take = v - c > params.tie_eps
        if len(ops.take_e):
            _, ek = ops.intervention(v)
            take &= ek != 0
            kind[k] = take
            e[k] = np.where(take, ek, 0.0)
    meta = {
        "objective": params.objective,
        "gamma": params.gamma,
        "inventory_unit": params.inventory_unit,
        "lbar": params.lbar,
        "ebar": params.ebar,
        "eta": params.eta,
        "substeps": ops.substeps,
        "dtau": ops.dtau,
    }
    return PolicyTable(grid, kind, qb, qa, lb, la, e, meta)


def check_solution(surface: ValueSurface, model: MarketModel, grid: SolverGrid, params: SolverParams) -> dict[str, Any]:
    """Audit a solved surface: obstacle, terminal condition, symmetry, positivity."""
    ops = _Operators(model, grid, params)
    worst = -np.inf
    for k in range(surface.values.shape[0]):
        v = surface.values[k]
        best, _ = ops.intervention(v)
        if ops.exp:
            viol = np.where(np.isfinite(best), (v - best) / np.maximum(np.abs(best), POSITIVE_FLOOR), -np.inf)
        else:
            viol = best - v
        worst = max(worst, float(np.max(viol)))
    term = terminal_values(model, grid, params)
    vals = surface.values
    diag = {
        "obstacle_violation": worst if np.isfinite(worst) else 0.0,
        "terminal_error": float(np.max(np.abs(vals[-1] - term))),
        "symmetry_residual": float(np.max(np.abs(vals - vals[:, ::-1, :]))),
        "min_value": float(vals.min()),
        "substeps": surface.substeps,
        "dtau": surface.dtau,
        "floor_hits": surface.floor_hits,
    }
    if params.objective == "exponential":
        diag["positive"] = bool(np.all(vals > 0))
    return diag
