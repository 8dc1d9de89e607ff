"""Multi-touch conversion attribution and ROI-driven budget allocation.

Heuristic credit rules, exact Shapley values over channel coalitions, the
pairwise-conditional probabilistic model, its causal extension, bagged
logistic-regression importances, and the greedy channel budget allocator.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import FeatureVector, Price
from .response import LinearModel, lr_sgd_step

logger = logging.getLogger(__name__)

HEURISTIC_MODELS = ("last", "first", "linear", "time_decay", "position", "custom")


class AttributionError(ValueError):
    pass


@dataclass(frozen=True)
class TouchpointPath:
    """One user journey: ordered (channel, timestamp) events plus the
    conversion label and value."""

    events: tuple[tuple[str, int], ...]
    converted: bool
    value: Price = Price(0)

    def __post_init__(self):
        times = [t for _, t in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise AttributionError("touchpoint timestamps must be non-decreasing")

    @property
    def channels(self) -> tuple[str, ...]:
        return tuple(c for c, _ in self.events)

    @property
    def channel_set(self) -> frozenset[str]:
        return frozenset(self.channels)


def heuristic_credit(
    path: TouchpointPath,
    model: str,
    custom_weights: Optional[Sequence[float]] = None,
    time_decay: str = "proportional",
) -> np.ndarray:
    """Per-touchpoint credit under a rule-based model; weights sum to 1.

    time_decay="proportional" weights touchpoint k by k / sum(k), the
    10/20/30/40 pattern on four touches; "exponential" doubles the weight
    of each later touchpoint instead.
    """
    if not path.converted:
        raise AttributionError("credit is only defined for converted paths")
    n = len(path.events)
    if n == 0:
        raise AttributionError("path has no touchpoints")
    if model not in HEURISTIC_MODELS:
        raise AttributionError(f"unknown heuristic model {model!r}")
    credit = np.zeros(n)
    if model == "last":
        credit[-1] = 1.0
    elif model == "first":
        credit[0] = 1.0
    elif model == "linear":
        credit[:] = 1.0 / n
    elif model == "time_decay":
        if time_decay == "proportional":
            ranks = np.arange(1, n + 1, dtype=float)
        elif time_decay == "exponential":
            ranks = 2.0 ** np.arange(n, dtype=float)
        else:
            raise AttributionError(f"unknown time_decay flavour {time_decay!r}")
        credit = ranks / ranks.sum()
    elif model == "position":
        if n == 1:
            credit[0] = 1.0
        elif n == 2:
            credit[:] = 0.5
        else:
            credit[0] = credit[-1] = 0.4
            credit[1:-1] = 0.2 / (n - 2)
    else:
        if custom_weights is None or len(custom_weights) != n:
            raise AttributionError("custom model needs one weight per touchpoint")
        w = np.asarray(custom_weights, dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise AttributionError("custom weights must be non-negative with positive sum")
        credit = w / w.sum()
    return credit


# ---------------------------------------------------------------------------
# Shapley values
# ---------------------------------------------------------------------------


def coalition_values(paths: Sequence[TouchpointPath]) -> dict[frozenset, float]:
    """Empirical coalition value: conversion rate among users exposed to
    exactly each channel set (repeat exposures collapsed). Unobserved
    subsets default to 0 when queried."""
    totals: dict[frozenset, list[int]] = {}
    for p in paths:
        key = p.channel_set
        conv, cnt = totals.setdefault(key, [0, 0])
        totals[key][0] = conv + (1 if p.converted else 0)
        totals[key][1] = cnt + 1
    return {k: conv / cnt for k, (conv, cnt) in totals.items()}


def shapley_values(
    value: Mapping[frozenset, float],
    channels: Sequence[str],
) -> dict[str, float]:
    """Exact Shapley attribution of the coalition value across channels:

        V_k = sum_{S subseteq C\\k} |S|! (|C|-|S|-1)! / |C|! * (v(S+k) - v(S))

    Exact enumeration; capped at |C| <= 20 coalitions.
    """
    chans = list(channels)
    m = len(chans)
    if m > 20:
        raise AttributionError("exact Shapley enumeration is capped at 20 channels")
    fact = [math.factorial(i) for i in range(m + 1)]
    denom = fact[m]

    def v(s: frozenset) -> float:
        return float(value.get(s, 0.0))

    result: dict[str, float] = {}
    for k in chans:
        rest = [c for c in chans if c != k]
        total = 0.0
        for size in range(m):
            w = fact[size] * fact[m - size - 1] / denom
            for combo in itertools.combinations(rest, size):
                s = frozenset(combo)
                total += w * (v(s | {k}) - v(s))
        result[k] = total
    return result


# ---------------------------------------------------------------------------
# Probabilistic (pairwise-conditional) model and its causal extension
# ---------------------------------------------------------------------------


@dataclass
class ChannelStats:
    """Exposure/conversion counts per channel and channel pair, counted
    over users (one path per user)."""

    channels: tuple[str, ...]
    pos: dict[str, int] = field(default_factory=dict)
    neg: dict[str, int] = field(default_factory=dict)
    pair_pos: dict[frozenset, int] = field(default_factory=dict)
    pair_neg: dict[frozenset, int] = field(default_factory=dict)

    @classmethod
    def from_paths(cls, paths: Sequence[TouchpointPath]) -> "ChannelStats":
        channels = tuple(sorted({c for p in paths for c in p.channel_set}))
        stats = cls(channels=channels)
        for p in paths:
            touched = sorted(p.channel_set)
            bucket_pos = 1 if p.converted else 0
            for c in touched:
                stats.pos[c] = stats.pos.get(c, 0) + bucket_pos
                stats.neg[c] = stats.neg.get(c, 0) + (1 - bucket_pos)
            for a, b in itertools.combinations(touched, 2):
                key = frozenset((a, b))
                stats.pair_pos[key] = stats.pair_pos.get(key, 0) + bucket_pos
                stats.pair_neg[key] = stats.pair_neg.get(key, 0) + (1 - bucket_pos)
        return stats

    def p_single(self, c: str) -> Optional[float]:
        n = self.pos.get(c, 0) + self.neg.get(c, 0)
        return self.pos.get(c, 0) / n if n else None

    def p_pair(self, a: str, b: str) -> Optional[float]:
        key = frozenset((a, b))
        n = self.pair_pos.get(key, 0) + self.pair_neg.get(key, 0)
        return self.pair_pos.get(key, 0) / n if n else None


def shao_value(stats: ChannelStats, channel: str) -> float:
    """Pairwise-conditional contribution:

        V(i) = 1/2 P(y|i) + 1/(2 N_{j!=i}) sum_j (P(y|i,j) - P(y|j))

    Channels whose conditionals have empty denominators are excluded from
    the j-sum (logged), and pairs never observed together contribute their
    singleton baseline only.
    """
    p_i = stats.p_single(channel)
    if p_i is None:
        raise AttributionError(f"channel {channel!r} has no exposures")
    others = [c for c in stats.channels if c != channel]
    usable = []
    for j in others:
        p_j = stats.p_single(j)
        if p_j is None:
            logger.warning("channel %s has no exposures; excluded from pair sum", j)
            continue
        p_ij = stats.p_pair(channel, j)
        usable.append((p_ij if p_ij is not None else 0.0, p_j))
    if not usable:
        return 0.5 * p_i
    pair_term = sum(p_ij - p_j for p_ij, p_j in usable) / (2 * len(usable))
    return 0.5 * p_i + pair_term


def causal_value(paths: Sequence[TouchpointPath], channel: str) -> float:
    """Context-weighted uplift of a channel:

        V(i) = sum_S w_{S,i} (P(y | S, i) - P(y | S))

    where S is the set of other channels a user saw, w_{S,i} is the
    empirical frequency of S among users exposed to i, and P(y|S) counts
    users exposed to exactly S without i. Contexts with no i-free support
    contribute 0.
    """
    exposed: dict[frozenset, list[int]] = {}
    unexposed: dict[frozenset, list[int]] = {}
    for p in paths:
        chans = p.channel_set
        y = 1 if p.converted else 0
        if channel in chans:
            ctx = chans - {channel}
            cell = exposed.setdefault(ctx, [0, 0])
        else:
            cell = unexposed.setdefault(chans, [0, 0])
        cell[0] += y
        cell[1] += 1
    n_exposed = sum(cnt for _, cnt in exposed.values())
    if n_exposed == 0:
        raise AttributionError(f"channel {channel!r} has no exposures")
    total = 0.0
    for ctx, (conv, cnt) in exposed.items():
        weight = cnt / n_exposed
        baseline = unexposed.get(ctx)
        if baseline is None or baseline[1] == 0:
            continue
        total += weight * (conv / cnt - baseline[0] / baseline[1])
    return total


# ---------------------------------------------------------------------------
# Bagged logistic regression importances
# ---------------------------------------------------------------------------


def bagged_lr_attribution(
    paths: Sequence[TouchpointPath],
    channels: Sequence[str],
    bags: int,
    rng: np.random.Generator,
    channel_fraction: Optional[float] = None,
    epochs: int = 20,
    eta: float = 0.5,
    lam: float = 0.0,
) -> dict[str, float]:
    """Average per-channel logistic weights over bootstrap bags.

    Features are binary channel-exposure indicators. With
    ``channel_fraction`` set, each bag trains on a random channel subset
    and the weights of left-out channels count as zero for that bag.
    """
    if bags < 1:
        raise AttributionError("need at least one bag")
    labels = {1 if p.converted else 0 for p in paths}
    if labels != {0, 1}:
        raise AttributionError("need both converted and unconverted paths")
    chans = list(channels)
    index = {c: i for i, c in enumerate(chans)}
    dim = len(chans)
    rows = [
        (tuple(sorted(index[c] for c in p.channel_set if c in index)), 1 if p.converted else 0)
        for p in paths
    ]
    n = len(rows)
    totals = np.zeros(dim)
    for _ in range(bags):
        sample = [rows[i] for i in rng.integers(0, n, size=n)]
        if channel_fraction is None:
            active = set(range(dim))
        else:
            size = max(1, int(round(channel_fraction * dim)))
            active = set(rng.choice(dim, size=size, replace=False).tolist())
        model = LinearModel.zeros(dim, lam=lam)
        for _ in range(epochs):
            for idx, y in sample:
                kept = tuple(i for i in idx if i in active)
                lr_sgd_step(model, FeatureVector(indices=kept, dimension=dim), y, eta)
        mask = np.zeros(dim)
        mask[list(active)] = 1.0
        totals += model.weights * mask
    averaged = totals / bags
    return {c: float(averaged[index[c]]) for c in chans}


# ---------------------------------------------------------------------------
# Credit normalisation and budget allocation
# ---------------------------------------------------------------------------


def conversion_credit(values: Mapping[str, float], touched: Iterable[str]) -> dict[str, float]:
    """P(channel | conversion) = V_i / sum_j V_j over the touched channels."""
    touched = list(touched)
    total = sum(values[c] for c in touched)
    if total <= 0:
        raise AttributionError("total channel value must be positive")
    return {c: values[c] / total for c in touched}


def channel_roi(
    conversions: Sequence[tuple[float, Sequence[str]]],
    values: Mapping[str, float],
    costs: Mapping[str, float],
) -> dict[str, float]:
    """ROI per channel: attributed conversion value over channel cost,
    R_i = sum_a P(x_i|a) r_a / Cost_i."""
    attributed: dict[str, float] = {c: 0.0 for c in costs}
    for value_a, touched in conversions:
        credit = conversion_credit(values, touched)
        for c, share in credit.items():
            attributed[c] = attributed.get(c, 0.0) + share * value_a
    roi = {}
    for c, cost in costs.items():
        if cost <= 0:
            raise AttributionError(f"channel {c!r} cost must be positive")
        roi[c] = attributed.get(c, 0.0) / cost
    return roi


def allocate_budget(
    roi: Sequence[float],
    caps: Sequence[float],
    budget: float,
) -> list[float]:
    """Greedy budget fill in descending ROI order; exact for this LP since
    the objective is linear and constraints are a box plus one sum cap.
    Allocates min(budget, sum of caps) in total."""
    if budget < 0:
        raise AttributionError("budget must be non-negative")
    if len(roi) != len(caps):
        raise AttributionError("one cap per ROI entry required")
    if any(c < 0 for c in caps):
        raise AttributionError("caps must be non-negative")
    order = sorted(range(len(roi)), key=lambda i: (-roi[i], i))
    remaining = float(budget)
    out = [0.0] * len(roi)
    for i in order:
        take = min(caps[i], remaining)
        out[i] = take
        remaining -= take
        if remaining <= 0:
            break
    return out
