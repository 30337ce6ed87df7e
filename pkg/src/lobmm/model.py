"""Market primitives: spread grid, quotes, fees, and the price/cost arithmetic.

Prices are handled as ``p + k * delta / 2`` where ``k`` is an integer number of
half ticks, so quote offsets never accumulate rounding drift.
"""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np

ROW_SUM_TOL = 1e-9


class ModelError(ValueError):
    """Raised when a market model or one of its components is invalid."""


class InadmissibleQuote(ModelError):
    pass


class QuoteBid(enum.IntEnum):
    Bb = 0
    BbPlus = 1

    @property
    def label(self) -> str:
        return "Bb+" if self is QuoteBid.BbPlus else "Bb"


class QuoteAsk(enum.IntEnum):
    Ba = 0
    BaMinus = 1

    @property
    def label(self) -> str:
        return "Ba-" if self is QuoteAsk.BaMinus else "Ba"


BID_LABELS = ("Bb", "Bb+")
ASK_LABELS = ("Ba", "Ba-")


def parse_quote(side: str, name: str) -> QuoteBid | QuoteAsk:
    labels = BID_LABELS if side == "bid" else ASK_LABELS
    if name not in labels:
        raise ModelError(f"unknown {side} quote {name!r}; expected one of {labels}")
    idx = labels.index(name)
    return QuoteBid(idx) if side == "bid" else QuoteAsk(idx)


@dataclass(frozen=True)
class SpreadGrid:
    delta: float
    m: int

    def __post_init__(self) -> None:
        if not (self.delta > 0):
            raise ModelError(f"tick size must be positive, got {self.delta}")
        if int(self.m) != self.m or self.m < 1:
            raise ModelError(f"number of spread states must be an integer >= 1, got {self.m}")

    @property
    def states(self) -> np.ndarray:
        """Spread indices 1..m."""
        return np.arange(1, self.m + 1)

    @property
    def spreads(self) -> np.ndarray:
        return self.states * self.delta

    def half_spread(self, i: int | np.ndarray) -> float | np.ndarray:
        return i * self.delta / 2

    def check_state(self, i: int) -> None:
        if not 1 <= i <= self.m:
            raise ModelError(f"spread index {i} outside 1..{self.m}")

    def clamp_state(self, i: int) -> int:
        return min(max(int(i), 1), self.m)


@dataclass(frozen=True)
class FeeSchedule:
    """Per-share maker rebate, per-share taker fee and fixed fee per market order."""

    rebate_per_share: float = 0.0
    take_fee_per_share: float = 0.0
    fixed_fee: float = 0.0

    def __post_init__(self) -> None:
        for name in ("rebate_per_share", "take_fee_per_share", "fixed_fee"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ModelError(f"fee field {name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class PriceModel:
    kind: str = "martingale"
    b: float = 0.0
    sigma: float = 0.0
    p0: float = 45.0

    def __post_init__(self) -> None:
        if self.kind not in ("martingale", "bachelier"):
            raise ModelError(f"price kind must be 'martingale' or 'bachelier', got {self.kind!r}")
        if not (self.sigma >= 0):
            raise ModelError(f"price volatility must be >= 0, got {self.sigma}")
        if self.kind == "martingale" and self.b != 0:
            raise ModelError("a martingale price model cannot carry a drift")


@dataclass(frozen=True)
class TickClock:
    """Piecewise-constant intensity of the spread-change clock.

    ``rates[k]`` applies on ``[boundaries[k], boundaries[k+1])``. Times before the
    first boundary use the first rate, times after the last use the last rate.
    """

    boundaries: tuple[float, ...]
    rates: tuple[float, ...]

    def __post_init__(self) -> None:
        b = tuple(float(x) for x in self.boundaries)
        r = tuple(float(x) for x in self.rates)
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "rates", r)
        if len(b) < 2 or len(r) != len(b) - 1:
            raise ModelError("tick clock needs len(rates) == len(boundaries) - 1 >= 1")
        if any(b2 <= b1 for b1, b2 in zip(b, b[1:])):
            raise ModelError("tick clock boundaries must be strictly ascending")
        if any(not (x >= 0 and math.isfinite(x)) for x in r):
            raise ModelError("tick clock rates must be finite and >= 0")

    @classmethod
    def constant(cls, rate: float, horizon: float) -> "TickClock":
        return cls((0.0, float(horizon)), (float(rate),))

    def rate(self, t: float) -> float:
        k = int(np.searchsorted(self.boundaries, t, side="right")) - 1
        k = min(max(k, 0), len(self.rates) - 1)
        return self.rates[k]

    @property
    def max_rate(self) -> float:
        return max(self.rates)


@dataclass(frozen=True)
class MarketModel:
    """Calibrated market primitives.

    ``exec_bid[i-1, q]`` is the execution intensity of a bid quote ``q`` (0 = Bb,
    1 = Bb+) at spread ``i * delta``; ``exec_ask`` likewise with 0 = Ba, 1 = Ba-.
    """

    grid: SpreadGrid
    rho: np.ndarray
    tick_clock: TickClock
    exec_bid: np.ndarray
    exec_ask: np.ndarray
    fees: FeeSchedule = field(default_factory=FeeSchedule)
    price: PriceModel = field(default_factory=PriceModel)

    def __post_init__(self) -> None:
        m = self.grid.m
        rho = np.array(self.rho, dtype=float)
        bid = np.array(self.exec_bid, dtype=float)
        ask = np.array(self.exec_ask, dtype=float)
        if rho.shape != (m, m):
            raise ModelError(f"rho must be {m}x{m}, got shape {rho.shape}")
        if np.any(rho < 0) or not np.all(np.isfinite(rho)):
            raise ModelError("rho entries must be finite and >= 0")
        if np.any(np.diag(rho) != 0):
            raise ModelError("rho must have a zero diagonal")
        if m > 1 and np.max(np.abs(rho.sum(axis=1) - 1)) > ROW_SUM_TOL:
            raise ModelError(f"rho rows must sum to 1 (row sums {rho.sum(axis=1)})")
        for name, arr in (("exec_bid", bid), ("exec_ask", ask)):
            if arr.shape != (m, 2):
                raise ModelError(f"{name} must be {m}x2, got shape {arr.shape}")
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ModelError(f"{name} intensities must be finite and >= 0")
        for arr in (rho, bid, ask):
            arr.setflags(write=False)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "exec_bid", bid)
        object.__setattr__(self, "exec_ask", ask)
        bad = [i + 1 for i in range(m) if bid[i, 1] < bid[i, 0] or ask[i, 1] < ask[i, 0]]
        if bad:
            warnings.warn(
                f"improved quotes execute slower than best quotes at spread states {bad}",
                stacklevel=2,
            )

    @property
    def m(self) -> int:
        return self.grid.m

    @property
    def delta(self) -> float:
        return self.grid.delta

    def intensity(self, side: str, quote: QuoteBid | QuoteAsk, i: int) -> float:
        """Execution rate of a quote at spread state ``i`` (table lookup)."""
        self.grid.check_state(i)
        if side not in ("bid", "ask"):
            raise ModelError(f"side must be 'bid' or 'ask', got {side!r}")
        table = self.exec_bid if side == "bid" else self.exec_ask
        return float(table[i - 1, int(quote)])

    def max_event_rate(self) -> float:
        """Largest total event rate out of any state (clock + best quotes)."""
        out = self.tick_clock.max_rate * self.rho.sum(axis=1)
        return float(np.max(out + self.exec_bid.max(axis=1) + self.exec_ask.max(axis=1)))

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "delta": self.grid.delta,
            "m": self.grid.m,
            "rho": self.rho.tolist(),
            "tick_clock": {
                "boundaries": list(self.tick_clock.boundaries),
                "rates": list(self.tick_clock.rates),
            },
            "exec_bid": {lab: self.exec_bid[:, k].tolist() for k, lab in enumerate(BID_LABELS)},
            "exec_ask": {lab: self.exec_ask[:, k].tolist() for k, lab in enumerate(ASK_LABELS)},
            "fees": {
                "rebate_per_share": self.fees.rebate_per_share,
                "take_fee_per_share": self.fees.take_fee_per_share,
                "fixed_fee": self.fees.fixed_fee,
            },
            "price": {
                "kind": self.price.kind,
                "b": self.price.b,
                "sigma": self.price.sigma,
                "p0": self.price.p0,
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MarketModel":
        _reject_unknown(d, {"delta", "m", "rho", "tick_clock", "exec_bid", "exec_ask", "fees", "price"}, "model")
        try:
            grid = SpreadGrid(float(d["delta"]), int(d["m"]))
            clock_d = d["tick_clock"]
            _reject_unknown(clock_d, {"boundaries", "rates"}, "tick_clock")
            clock = TickClock(tuple(clock_d["boundaries"]), tuple(clock_d["rates"]))
            exec_bid = _quote_table(d["exec_bid"], BID_LABELS, grid.m, "exec_bid")
            exec_ask = _quote_table(d["exec_ask"], ASK_LABELS, grid.m, "exec_ask")
            fees = _fees_from_dict(d.get("fees", {}))
            price_d = d.get("price", {})
            _reject_unknown(price_d, {"kind", "b", "sigma", "p0"}, "price")
            price = PriceModel(**price_d)
            rho = np.asarray(d["rho"], dtype=float)
        except KeyError as exc:
            raise ModelError(f"model file is missing field {exc}") from None
        return cls(grid, rho, clock, exec_bid, exec_ask, fees, price)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MarketModel":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ModelError(f"model file is not valid JSON: {exc}") from None
        return cls.from_dict(d)


def _reject_unknown(d: Mapping[str, Any], allowed: set[str], where: str) -> None:
    if not isinstance(d, Mapping):
        raise ModelError(f"{where} must be a JSON object")
    extra = sorted(set(d) - allowed)
    if extra:
        raise ModelError(f"unknown fields in {where}: {extra}")


def _quote_table(d: Mapping[str, Any], labels: tuple[str, str], m: int, where: str) -> np.ndarray:
    _reject_unknown(d, set(labels), where)
    cols = []
    for lab in labels:
        col = np.asarray(d[lab], dtype=float)
        if col.shape != (m,):
            raise ModelError(f"{where}[{lab!r}] must have {m} entries")
        cols.append(col)
    return np.stack(cols, axis=1)


def _fees_from_dict(d: Mapping[str, Any]) -> FeeSchedule:
    allowed = {"rebate_per_share", "take_fee_per_share", "fixed_fee", "proportional_rebate", "proportional_fee"}
    _reject_unknown(d, allowed, "fees")
    for key in ("proportional_rebate", "proportional_fee"):
        if d.get(key, 0):
            raise ModelError(f"{key} is not supported; use per-share rebates/fees")
    return FeeSchedule(
        rebate_per_share=float(d.get("rebate_per_share", 0.0)),
        take_fee_per_share=float(d.get("take_fee_per_share", 0.0)),
        fixed_fee=float(d.get("fixed_fee", 0.0)),
    )


# state and actions ------------------------------------------------------------


@dataclass(frozen=True)
class MarketState:
    x: float
    y: float
    p: float
    i: int
    t: float = 0.0


@dataclass(frozen=True)
class MakeAction:
    qb: QuoteBid
    qa: QuoteAsk
    lb: float
    la: float


@dataclass(frozen=True)
class TakeAction:
    e: float


# price and cost arithmetic ----------------------------------------------------


def admissible_quotes(i: int) -> list[tuple[QuoteBid, QuoteAsk]]:
    if i < 1:
        raise ModelError(f"spread index must be >= 1, got {i}")
    if i == 1:
        return [(QuoteBid.Bb, QuoteAsk.Ba)]
    return [(qb, qa) for qb in QuoteBid for qa in QuoteAsk]


def _half_ticks(p: float, k: int, delta: float) -> float:
    return p + k * (delta / 2)


def bid_price(qb: QuoteBid, p: float, i: int, grid: SpreadGrid, fees: FeeSchedule) -> float:
    grid.check_state(i)
    if qb == QuoteBid.BbPlus and i == 1:
        raise InadmissibleQuote("Bb+ is not admissible at a one-tick spread")
    k = -i + 2 * int(qb == QuoteBid.BbPlus)
    return _half_ticks(p, k, grid.delta) - fees.rebate_per_share


def ask_price(qa: QuoteAsk, p: float, i: int, grid: SpreadGrid, fees: FeeSchedule) -> float:
    grid.check_state(i)
    if qa == QuoteAsk.BaMinus and i == 1:
        raise InadmissibleQuote("Ba- is not admissible at a one-tick spread")
    k = i - 2 * int(qa == QuoteAsk.BaMinus)
    return _half_ticks(p, k, grid.delta) + fees.rebate_per_share


def take_cost(e: float, p: float, i: int, grid: SpreadGrid, fees: FeeSchedule) -> float:
    """Cash paid for a market order of signed size ``e`` (negative = sell)."""
    grid.check_state(i)
    return e * p + abs(e) * (i * grid.delta / 2 + fees.take_fee_per_share) + fees.fixed_fee


def liquidation_value(x: float, y: float, p: float, i: int, grid: SpreadGrid, fees: FeeSchedule) -> float:
    return x - take_cost(-y, p, i, grid, fees)


# reference parameter set --------------------------------------------------------

# Reference spread transition matrix, rounded to 3 decimals (rows sum to 0.997..0.999).
REF_RHO = (
    (0.000, 0.410, 0.220, 0.160, 0.142, 0.065),
    (0.201, 0.000, 0.435, 0.192, 0.103, 0.067),
    (0.113, 0.221, 0.000, 0.4582, 0.147, 0.059),
    (0.070, 0.085, 0.275, 0.000, 0.465, 0.102),
    (0.068, 0.049, 0.073, 0.363, 0.000, 0.446),
    (0.077, 0.057, 0.059, 0.112, 0.692, 0.000),
)

# Hourly tick-clock intensities (s^-1), 9:30-16:30.
REF_CLOCK_RATES = (1.654, 0.799, 0.516, 0.377, 0.632, 1.305, 2.113)

# Execution intensities (s^-1); columns Ba, Ba-, Bb, Bb+.
REF_EXEC = (
    (0.0539, 0.1485, 0.0718, 0.1763),
    (0.0465, 0.0979, 0.0520, 0.1144),
    (0.0401, 0.0846, 0.0419, 0.0915),
    (0.0360, 0.0856, 0.0409, 0.0896),
    (0.0435, 0.1009, 0.0452, 0.0930),
    (0.0554, 0.1202, 0.0614, 0.1255),
)

REF_DELTA = 0.005
REF_FEES = FeeSchedule(rebate_per_share=0.0008, take_fee_per_share=0.0012, fixed_fee=1e-6)


def normalize_rows(rho: Iterable[Iterable[float]]) -> np.ndarray:
    r = np.array(rho, dtype=float)
    np.fill_diagonal(r, 0.0)
    s = r.sum(axis=1, keepdims=True)
    if np.any(s <= 0):
        raise ModelError("cannot normalize a transition row with zero mass")
    return r / s


def reference_model(
    *,
    symmetric: bool = True,
    clock_rate: float = 1.0,
    horizon: float = 300.0,
    sigma: float | None = None,
    p0: float = 45.0,
    fees: FeeSchedule = REF_FEES,
) -> MarketModel:
    """Reference six-state parameter set with the backtest defaults.

    Rows of the rounded transition matrix are renormalized to sum to one. The
    mid-price volatility defaults to 0.3 ticks per sqrt(s).
    """
    exec_tab = np.array(REF_EXEC)
    exec_ask = exec_tab[:, [0, 1]]
    exec_bid = exec_tab[:, [2, 3]]
    sigma = 0.3 * REF_DELTA if sigma is None else sigma
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = MarketModel(
            grid=SpreadGrid(REF_DELTA, 6),
            rho=normalize_rows(REF_RHO),
            tick_clock=TickClock.constant(clock_rate, horizon),
            exec_bid=exec_bid,
            exec_ask=exec_ask,
            fees=fees,
            price=PriceModel("martingale", 0.0, sigma, p0),
        )
    if symmetric:
        from .calibration import symmetrize

        model = symmetrize(model)
    return model
