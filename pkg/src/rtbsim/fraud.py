"""Supply-quality checks: co-visit network projection for suspicious
publisher clustering, and viewability accounting (pixel percentage times
exposure time)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

TICK_SECONDS = 0.1
VIEWABILITY_STUDY_PRESET = {"pixel_threshold": 0.75, "exposure_seconds": 2.0}
VIEWABILITY_POLICY_PRESET = {"pixel_threshold": 0.5, "exposure_seconds": 1.0}


class FraudError(ValueError):
    pass


@dataclass(frozen=True)
class BipartiteVisits:
    """Browser-website visit graph over a time window; edges are unique
    (browser, website) pairs."""

    browsers: frozenset[str]
    websites: frozenset[str]
    edges: frozenset[tuple[str, str]]

    def __post_init__(self):
        for b, w in self.edges:
            if b not in self.browsers or w not in self.websites:
                raise FraudError(f"edge ({b!r}, {w!r}) references undeclared nodes")

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[str, str]]) -> "BipartiteVisits":
        es = frozenset((b, w) for b, w in edges)
        return cls(
            browsers=frozenset(b for b, _ in es),
            websites=frozenset(w for _, w in es),
            edges=es,
        )

    def audience(self, website: str) -> frozenset[str]:
        return frozenset(b for b, w in self.edges if w == website)


@dataclass(frozen=True)
class CoVisitGraph:
    """Directed website projection: edge x -> y present iff the share of
    x's audience that also visits y is at least the threshold."""

    websites: tuple[str, ...]
    rates: dict[tuple[str, str], float]
    threshold: float
    excluded: tuple[str, ...] = ()

    @property
    def edges(self) -> set[tuple[str, str]]:
        return set(self.rates)


def build_covisit(visits: BipartiteVisits, threshold: float) -> CoVisitGraph:
    """Project the visit graph onto websites: x -> y when
    |audience(x) & audience(y)| / |audience(x)| >= threshold.

    Websites without any browsers cannot be rated (zero division); they are
    excluded and logged. Ties at the threshold count as edges.
    """
    if not 0.0 < threshold <= 1.0:
        raise FraudError("threshold must lie in (0, 1]")
    audiences = {w: visits.audience(w) for w in visits.websites}
    excluded = tuple(sorted(w for w, a in audiences.items() if not a))
    for w in excluded:
        logger.warning("website %s has no browsers; excluded from projection", w)
    active = sorted(w for w, a in audiences.items() if a)
    rates: dict[tuple[str, str], float] = {}
    for x in active:
        gx = audiences[x]
        for y in active:
            if x == y:
                continue
            rate = len(gx & audiences[y]) / len(gx)
            if rate >= threshold:
                rates[(x, y)] = rate
    return CoVisitGraph(websites=tuple(active), rates=rates, threshold=threshold, excluded=excluded)


def suspicious_clusters(graph: CoVisitGraph, min_size: int = 2) -> list[tuple[str, ...]]:
    """Weakly-connected components of at least ``min_size`` websites, ranked
    by size and then by mean internal co-visit rate (both descending)."""
    if min_size < 1:
        raise FraudError("min_size must be >= 1")
    neighbours: dict[str, set[str]] = {w: set() for w in graph.websites}
    for x, y in graph.rates:
        neighbours[x].add(y)
        neighbours[y].add(x)
    seen: set[str] = set()
    components: list[set[str]] = []
    for start in graph.websites:
        if start in seen or not neighbours[start]:
            continue
        stack = [start]
        comp: set[str] = set()
        while stack:
            node = stack.pop()
            if node in comp:
                continue
            comp.add(node)
            stack.extend(neighbours[node] - comp)
        seen |= comp
        if len(comp) >= min_size:
            components.append(comp)

    def mean_rate(comp: set[str]) -> float:
        internal = [r for (x, y), r in graph.rates.items() if x in comp and y in comp]
        return sum(internal) / len(internal) if internal else 0.0

    ranked = sorted(components, key=lambda c: (-len(c), -mean_rate(c), tuple(sorted(c))))
    return [tuple(sorted(c)) for c in ranked]


# ---------------------------------------------------------------------------
# Viewability
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rect:
    top: float
    left: float
    bottom: float
    right: float

    def __post_init__(self):
        if self.bottom < self.top or self.right < self.left:
            raise FraudError("rect needs bottom >= top and right >= left")


@dataclass(frozen=True)
class ViewGeometry:
    """Ad creative bounds and browser viewport in page coordinates; the
    origin is the upper-left corner, y grows downward."""

    bounds: Rect
    viewport: Rect

    @property
    def width(self) -> float:
        return self.bounds.right - self.bounds.left

    @property
    def height(self) -> float:
        return self.bounds.bottom - self.bounds.top


def pixel_percentage(geometry: ViewGeometry) -> float:
    """Displayed pixel share of the creative: the product of the four
    clamped edge ratios, zero as soon as any ratio is non-positive (the
    creative is fully outside the viewport)."""
    h = geometry.height
    w = geometry.width
    if h <= 0 or w <= 0:
        raise FraudError("creative must have positive width and height")
    b, v = geometry.bounds, geometry.viewport
    factors = (
        min(1.0, (b.bottom - v.top) / h),
        min(1.0, (v.bottom - b.top) / h),
        min(1.0, (b.right - v.left) / w),
        min(1.0, (v.right - b.left) / w),
    )
    if any(f <= 0 for f in factors):
        return 0.0
    return math.prod(factors)


def viewable(
    trace: Sequence[tuple[float, float]],
    pixel_threshold: float,
    exposure_seconds: float,
) -> bool:
    """Replay a (timestamp_ms, pixel share) trace sampled every 0.1 s and
    decide whether some run of consecutive ticks at or above the pixel
    threshold spans the exposure time. The counter restarts whenever the
    share drops below the threshold.
    """
    if not 0.0 <= pixel_threshold <= 1.0:
        raise FraudError("pixel threshold must lie in [0, 1]")
    if exposure_seconds <= 0:
        raise FraudError("exposure threshold must be positive")
    if not trace:
        return False
    times = [t for t, _ in trace]
    for a, b in zip(times, times[1:]):
        if abs((b - a) - TICK_SECONDS * 1000.0) > 1e-6:
            raise FraudError("irregular tick spacing; expected 0.1 s between samples")
    needed = math.ceil(exposure_seconds * 10.0 - 1e-9)
    run = 0
    for _, share in trace:
        if share >= pixel_threshold:
            run += 1
            if run >= needed:
                return True
        else:
            run = 0
    return False
