"""Deterministic auction engine and synthetic opponent market.

Runs single-tier first/second-price auctions with hard and soft floors,
samples market prices as the maximum of independent opponent draws, and
exposes a Monte-Carlo expected-profit oracle used to check truthfulness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .core import Price, seeded_rng


@dataclass(frozen=True)
class FloorPolicy:
    """Hard floor rejects bids below it; a winning bid under the soft floor
    pays its own bid instead of the second price."""

    hard: Price = Price(0)
    soft: Optional[Price] = None

    def __post_init__(self):
        if self.soft is not None and self.soft < self.hard:
            raise ValueError("soft floor must be >= hard floor")


@dataclass(frozen=True)
class AuctionOutcome:
    winner: Optional[str]
    paying_price: Optional[Price]
    second_bid: Optional[Price]
    all_bids: tuple[Price, ...]  # descending

    @property
    def sold(self) -> bool:
        return self.winner is not None


@dataclass(frozen=True)
class OpponentModel:
    """Competing bids drawn i.i.d.; the market price is the max of
    ``opponent_count`` draws.

    kind: "uniform" (params: high), "lognormal" (params: mu, sigma of log
    price), or "empirical" (params: samples).
    """

    kind: str
    opponent_count: int = 1
    high: float = 0.0
    mu: float = 0.0
    sigma: float = 1.0
    samples: tuple[float, ...] = ()

    def __post_init__(self):
        if self.opponent_count < 1:
            raise ValueError("opponent_count must be >= 1")
        if self.kind == "uniform":
            if self.high <= 0:
                raise ValueError("uniform upper bound must be positive")
        elif self.kind == "lognormal":
            if self.sigma <= 0:
                raise ValueError("lognormal sigma must be positive")
        elif self.kind == "empirical":
            if not self.samples:
                raise ValueError("empirical model needs at least one sample")
        else:
            raise ValueError(f"unknown opponent model kind {self.kind!r}")


def _no_sale(all_bids: tuple[Price, ...]) -> AuctionOutcome:
    return AuctionOutcome(winner=None, paying_price=None, second_bid=None, all_bids=all_bids)


def _select_winner(bids: Mapping[str, Price], hard: Price):
    """Highest qualifying bid wins; ties go to the lowest bidder id."""
    qualifying = [(b, k) for k, b in bids.items() if b >= hard]
    if not qualifying:
        return None
    qualifying.sort(key=lambda t: (-t[0], t[1]))
    return qualifying


def run_second_price(bids: Mapping[str, Price], floor: FloorPolicy = FloorPolicy()) -> AuctionOutcome:
    """Second-price auction with floors.

    Payment is max(second qualifying bid, hard floor), except under a soft
    floor: a winning bid below the soft floor pays itself, and one at or
    above it pays max(second bid, soft floor).
    """
    all_bids = tuple(sorted((Price(b) for b in bids.values()), reverse=True))
    ranked = _select_winner(bids, floor.hard)
    if not ranked:
        return _no_sale(all_bids)
    win_bid, winner = ranked[0]
    second = ranked[1][0] if len(ranked) > 1 else None
    if floor.soft is not None:
        if win_bid < floor.soft:
            pay = win_bid
        else:
            pay = max(second if second is not None else floor.hard, floor.soft)
    else:
        pay = max(second if second is not None else floor.hard, floor.hard)
    return AuctionOutcome(winner=winner, paying_price=Price(pay), second_bid=second, all_bids=all_bids)


def run_first_price(bids: Mapping[str, Price], floor: FloorPolicy = FloorPolicy()) -> AuctionOutcome:
    """First-price auction: the winner pays its own bid."""
    all_bids = tuple(sorted((Price(b) for b in bids.values()), reverse=True))
    ranked = _select_winner(bids, floor.hard)
    if not ranked:
        return _no_sale(all_bids)
    win_bid, winner = ranked[0]
    second = ranked[1][0] if len(ranked) > 1 else None
    return AuctionOutcome(winner=winner, paying_price=win_bid, second_bid=second, all_bids=all_bids)


def draw_market_prices(model: OpponentModel, rng: np.random.Generator, size: int) -> np.ndarray:
    """Market prices (float) as max of opponent_count i.i.d. draws each."""
    n = model.opponent_count
    if model.kind == "uniform":
        draws = rng.uniform(0.0, model.high, size=(size, n))
    elif model.kind == "lognormal":
        draws = rng.lognormal(model.mu, model.sigma, size=(size, n))
    else:
        samples = np.asarray(model.samples, dtype=float)
        draws = samples[rng.integers(0, len(samples), size=(size, n))]
    return draws.max(axis=1)


def sample_market_price(model: OpponentModel, rng: np.random.Generator) -> Price:
    """One market price in ticks (rounded to the nearest tick)."""
    z = draw_market_prices(model, rng, 1)[0]
    return Price(int(round(z)))


def expected_profit(
    bid: float,
    value: float,
    model: OpponentModel,
    trials: int = 100_000,
    seed: int = 0,
) -> float:
    """Monte-Carlo estimate of the bidder's expected profit in a second-price
    auction: E[(value - Z) * 1{Z < bid}] over market prices Z.

    Deterministic given the seed, so evaluations across a bid grid share
    draws when called with the same seed.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if bid <= 0:
        return 0.0
    rng = seeded_rng(seed)
    z = draw_market_prices(model, rng, trials)
    won = z < bid
    return float(np.mean((value - z) * won))
