"""Shared domain types: prices, feature vectors, campaigns, logs, metrics, RNG.

Prices are integer ticks. One tick is one micro-unit of currency *per
impression*; CPM quotes are divided by 1000 before tick conversion. Keeping
auction arithmetic in integers avoids float drift in bid/market-price
comparisons and matches exchanges that require integer bid prices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

TICKS_PER_CURRENCY_UNIT = 1_000_000


class Price(int):
    """Non-negative integer price in ticks.

    Python integers are arbitrary precision, so arithmetic cannot overflow;
    the constructor enforces non-negativity and rejects fractional values so
    a tick amount is never silently truncated.
    """

    def __new__(cls, value) -> "Price":
        if isinstance(value, float):
            if not value.is_integer():
                raise ValueError(f"price must be a whole number of ticks, got {value!r}")
            value = int(value)
        v = int(value)
        if v < 0:
            raise ValueError(f"price must be >= 0, got {v}")
        return super().__new__(cls, v)

    def __repr__(self) -> str:
        return f"Price({int(self)})"


def price_from_currency(amount: float) -> Price:
    """Convert a per-impression currency amount to ticks (rounded to nearest)."""
    return Price(round(amount * TICKS_PER_CURRENCY_UNIT))


def price_from_cpm(cpm: float) -> Price:
    """Convert a CPM quote to per-impression ticks (CPM / 1000, then ticks)."""
    return price_from_currency(cpm / 1000.0)


def price_to_currency(ticks: int) -> float:
    """Per-impression currency value of a tick amount."""
    return ticks / TICKS_PER_CURRENCY_UNIT


@dataclass(frozen=True)
class FeatureVector:
    """Sparse binary one-hot vector: sorted active dimension ids."""

    indices: tuple[int, ...]
    dimension: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("feature indices must be strictly increasing")
        if idx and (idx[0] < 0 or idx[-1] >= self.dimension):
            raise ValueError("feature index out of range")

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class BidRequest:
    """One auction opportunity. ``true_ctr`` is simulator ground truth and
    must never be fed to a learner."""

    id: str
    timestamp: int
    features: FeatureVector
    true_ctr: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.true_ctr <= 1.0:
            raise ValueError("true_ctr must lie in [0, 1]")


@dataclass(frozen=True)
class Campaign:
    id: str
    budget: Price
    volume: int
    click_value: Price
    kpi: str = "clicks"  # "clicks" or "profit"
    lifetime: tuple[int, int] = (0, 1)

    def __post_init__(self):
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if self.volume <= 0:
            raise ValueError("volume must be positive")
        if self.kpi not in ("clicks", "profit"):
            raise ValueError(f"unknown kpi {self.kpi!r}")
        if self.lifetime[0] >= self.lifetime[1]:
            raise ValueError("lifetime start must precede end")


@dataclass(frozen=True)
class BidLogRecord:
    """One auction participation: bid, win flag, and (if won) price and label.

    Ties lose, so ``won`` implies ``market_price < bid``.
    """

    bid: Price
    won: bool
    market_price: Optional[Price] = None
    label: Optional[int] = None

    def __post_init__(self):
        if self.won:
            if self.market_price is None:
                raise ValueError("winning record requires a market price")
            if self.market_price > self.bid:
                raise ValueError("market price cannot exceed the winning bid")
        else:
            if self.market_price is not None or self.label is not None:
                raise ValueError("losing record carries no market price or label")


@dataclass(frozen=True)
class AuctionResult:
    """Per-auction result row consumed by compute_metrics."""

    entered: bool = True
    won: bool = False
    clicked: bool = False
    converted: bool = False
    cost: Price = Price(0)


@dataclass(frozen=True)
class MetricsReport:
    auctions_entered: int
    impressions: int
    clicks: int
    conversions: int
    spend: Price
    awr: float
    ctr: float
    ecpc: Optional[float]
    ecpm: Optional[float]

    def to_dict(self) -> dict:
        return {
            "auctions_entered": self.auctions_entered,
            "impressions": self.impressions,
            "clicks": self.clicks,
            "conversions": self.conversions,
            "spend_ticks": int(self.spend),
            "AWR": self.awr,
            "CTR": self.ctr,
            "eCPC_ticks": self.ecpc,
            "eCPM_ticks": self.ecpm,
        }


def compute_metrics(outcomes: Iterable[AuctionResult]) -> MetricsReport:
    """Aggregate per-auction results into counts and ratios.

    Ratios with a zero denominator are reported as 0 (CTR/AWR) or absent
    (eCPC/eCPM). eCPM is spend per thousand impressions, in ticks.
    """
    entered = impressions = clicks = conversions = 0
    spend = 0
    for o in outcomes:
        entered += 1 if o.entered else 0
        if o.won:
            impressions += 1
            spend += int(o.cost)
            clicks += 1 if o.clicked else 0
            conversions += 1 if o.converted else 0
    awr = impressions / entered if entered else 0.0
    ctr = clicks / impressions if impressions else 0.0
    ecpc = spend / clicks if clicks else None
    ecpm = spend / impressions * 1000.0 if impressions else None
    return MetricsReport(
        auctions_entered=entered,
        impressions=impressions,
        clicks=clicks,
        conversions=conversions,
        spend=Price(spend),
        awr=awr,
        ctr=ctr,
        ecpc=ecpc,
        ecpm=ecpm,
    )


def seeded_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic PCG64 generator for ``seed``.

    Extra integers select independent substreams (one per campaign, per
    slot, ...) that are stable across runs and platforms.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))
