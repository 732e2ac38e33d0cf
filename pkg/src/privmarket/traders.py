"""Trader strategies and the myopic best-response search.

Strategies see only published data: the step index, their own past trades,
the published share states and prices, the fee, and the (public) cost
function.  Nothing about the true state or the noise ever reaches them;
the context's field set is the enforcement point.

The arbitrage adversary here is the empirical one the budget experiments
need: a fixed-belief best-responder that re-trades whenever noise reopens
a price gap.  It is not a proof-grade worst case over all adaptive
strategies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .cost import ScaledCost
from .errors import InvalidParameterError, StrategyBugError

TRADE_SIZE_TOL = 1e-9

STRATEGY_KINDS = ("belief", "arbitrage_hunter", "herd", "random", "abstainer")


@dataclass(frozen=True)
class StrategyContext:
    """Published information available to a strategy at its arrival.

    t is the 1-based index this arrival would get; published_states and
    published_prices run from the opening state through step t-1.
    """

    t: int
    own_trades: tuple[np.ndarray, ...]
    published_states: tuple[np.ndarray, ...]
    published_prices: tuple[np.ndarray, ...]
    fee: float
    cost: ScaledCost


def expected_profit(ctx: StrategyContext, belief: np.ndarray, dq: np.ndarray) -> float:
    """<dq, belief> minus the trade's cost at the current published state."""
    q_hat = ctx.published_states[-1]
    return float(dq @ belief) - ctx.cost.trade_cost(q_hat, dq)


def _best_scale(ctx: StrategyContext, belief: np.ndarray, j: int, sign: float) -> float:
    """Optimal fractional size in [0, 1] for the trade sign * s * e_j.

    For the log-sum-exp kind the profit is maximized where the coordinate's
    price meets the belief, which solves in closed form from the published
    prices; the profit guarantee never relies on this shortcut because the
    caller re-evaluates the profit of whatever size comes back.
    """
    p_hat = ctx.published_prices[-1]
    b = float(belief[j])
    ph = float(p_hat[j])
    if b <= 0.0 or b >= 1.0 or ph <= 0.0 or ph >= 1.0:
        return 1.0
    s = math.log(b * (1.0 - ph) / ((1.0 - b) * ph)) / (ctx.cost.lam * sign)
    return min(max(s, 0.0), 1.0)


def maximize_profit(
    ctx: StrategyContext, belief: np.ndarray
) -> tuple[np.ndarray, float]:
    """Best trade among signed unit coordinates plus a fractional refinement.

    Evaluates the full trades +/- e_j for every coordinate, picks the most
    profitable (ties: lowest coordinate index, buy over sell), then line
    searches the size along that direction.  Returns (bundle, profit).
    """
    belief = np.asarray(belief, dtype=float)
    d = ctx.cost.d
    if belief.shape != (d,):
        raise InvalidParameterError(f"belief must have shape ({d},)")
    best_j, best_sign, best_profit = 0, 1.0, -math.inf
    for j in range(d):
        for sign in (1.0, -1.0):
            dq = np.zeros(d)
            dq[j] = sign
            profit = expected_profit(ctx, belief, dq)
            if profit > best_profit + 1e-15:
                best_j, best_sign, best_profit = j, sign, profit
    dq = np.zeros(d)
    dq[best_j] = best_sign
    s = _best_scale(ctx, belief, best_j, best_sign)
    if 0.0 < s < 1.0:
        frac = np.zeros(d)
        frac[best_j] = best_sign * s
        frac_profit = expected_profit(ctx, belief, frac)
        if frac_profit > best_profit:
            return frac, frac_profit
    return dq, best_profit


def best_response(ctx: StrategyContext, belief: np.ndarray) -> Optional[np.ndarray]:
    """The profit-maximizing trade if it beats the fee, else None (abstain)."""
    dq, profit = maximize_profit(ctx, belief)
    if profit > ctx.fee:
        return dq
    return None


class Strategy:
    """Single-owner stateful decision rule bound to one run."""

    kind = "abstract"

    def decide(self, ctx: StrategyContext) -> Optional[np.ndarray]:
        raise NotImplementedError


class BeliefTrader(Strategy):
    """Best-responds to a fixed private belief, net of the fee."""

    kind = "belief"

    def __init__(self, belief: np.ndarray):
        self.belief = np.asarray(belief, dtype=float)

    def decide(self, ctx: StrategyContext) -> Optional[np.ndarray]:
        return best_response(ctx, self.belief)


class ArbitrageHunter(Strategy):
    """Trades whenever published prices stray from its belief by > threshold.

    The threshold defaults to the fee at decision time, so a fee-free market
    gets hit on any deviation; it pays the fee and trades regardless of
    whether the expected profit clears it.
    """

    kind = "arbitrage_hunter"

    def __init__(self, belief: np.ndarray, threshold: float | None = None):
        self.belief = np.asarray(belief, dtype=float)
        self.threshold = threshold

    def decide(self, ctx: StrategyContext) -> Optional[np.ndarray]:
        threshold = self.threshold if self.threshold is not None else ctx.fee
        gap = float(np.max(np.abs(ctx.published_prices[-1] - self.belief)))
        if gap <= threshold:
            return None
        dq, _ = maximize_profit(ctx, self.belief)
        return dq


class Herd(Strategy):
    """Always buys one unit of a fixed coordinate."""

    kind = "herd"

    def __init__(self, coordinate: int = 0):
        self.coordinate = coordinate

    def decide(self, ctx: StrategyContext) -> Optional[np.ndarray]:
        dq = np.zeros(ctx.cost.d)
        dq[self.coordinate] = 1.0
        return dq


class RandomTrader(Strategy):
    """Uniform random signed unit coordinate trades."""

    kind = "random"

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def decide(self, ctx: StrategyContext) -> Optional[np.ndarray]:
        dq = np.zeros(ctx.cost.d)
        dq[int(self.rng.integers(ctx.cost.d))] = float(self.rng.choice([-1.0, 1.0]))
        return dq


class Abstainer(Strategy):
    """Never trades."""

    kind = "abstainer"

    def decide(self, ctx: StrategyContext) -> Optional[np.ndarray]:
        return None


def make_strategy(kind: str, params: dict | None, rng: np.random.Generator) -> Strategy:
    """Instantiate a strategy by kind name.

    belief/arbitrage_hunter accept {"belief": [...]} (default uniform) and
    the hunter additionally {"threshold": x}; herd accepts {"coordinate": j};
    "d" rides along in params so defaults know the dimension.
    """
    params = dict(params or {})
    d = params.pop("d", None)
    if kind in ("belief", "arbitrage_hunter"):
        belief = params.pop("belief", None)
        if belief is None:
            if d is None:
                raise InvalidParameterError(f"{kind} needs a belief or d")
            belief = np.full(d, 1.0 / d)
        belief = np.asarray(belief, dtype=float)
        if np.any(belief < 0.0) or abs(float(np.sum(belief)) - 1.0) > 1e-9:
            raise InvalidParameterError("belief must be a probability vector")
        if kind == "belief":
            strat: Strategy = BeliefTrader(belief)
        else:
            strat = ArbitrageHunter(belief, params.pop("threshold", None))
    elif kind == "herd":
        strat = Herd(int(params.pop("coordinate", 0)))
    elif kind == "random":
        strat = RandomTrader(rng)
    elif kind == "abstainer":
        strat = Abstainer()
    else:
        raise InvalidParameterError(f"unknown strategy kind {kind!r}")
    if params:
        raise InvalidParameterError(f"unknown {kind} params: {sorted(params)}")
    return strat


def step_strategy(strategy: Strategy, ctx: StrategyContext) -> Optional[np.ndarray]:
    """Ask a strategy for its decision and validate the bundle size."""
    dq = strategy.decide(ctx)
    if dq is None:
        return None
    dq = np.asarray(dq, dtype=float)
    if dq.shape != (ctx.cost.d,):
        raise StrategyBugError(
            f"{strategy.kind} returned shape {dq.shape}, wanted ({ctx.cost.d},)"
        )
    if not np.all(np.isfinite(dq)) or float(np.sum(np.abs(dq))) > 1.0 + TRADE_SIZE_TOL:
        raise StrategyBugError(f"{strategy.kind} returned an oversized bundle")
    return dq


def drive_session(session, stream: Iterator, histories: dict) -> bool:
    """Feed potential arrivals from stream until the session fills.

    Returns True when the stream ran dry first.  histories maps each
    strategy object to its accumulated own-trade list (shared across stages
    so a strategy's context always carries its full history).
    """
    while not session.is_full:
        try:
            strat = next(stream)
        except StopIteration:
            return True
        own = histories.setdefault(strat, [])
        ctx = StrategyContext(
            t=session.arrivals + 1,
            own_trades=tuple(own),
            published_states=tuple(session.published_states),
            published_prices=tuple(session.published_prices),
            fee=session.params.fee,
            cost=session.cost,
        )
        dq = step_strategy(strat, ctx)
        if dq is None:
            continue
        session.step(dq)
        own.append(dq)
    return False
