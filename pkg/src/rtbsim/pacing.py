"""Budget pacing: offline slot allocation, online pacing-rate throttling and
PID-based bid modification.

Throttling keeps a per-slot participation probability; bid modification
multiplies bids by exp(control signal). One controller per campaign,
strictly sequential updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Price

DP_TABLE_LIMIT = 20_000_000  # knapsack cells; beyond this advise coarser ticks


class PacingError(ValueError):
    pass


@dataclass(frozen=True)
class SlotPlan:
    """Per-slot budgets summing to the daily budget."""

    slot_budgets: tuple[Price, ...]
    slot_duration_ms: int = 3_600_000  # hourly slots by default

    def __post_init__(self):
        if any(b < 0 for b in self.slot_budgets):
            raise PacingError("slot budgets must be non-negative")

    @property
    def total(self) -> Price:
        return Price(sum(int(b) for b in self.slot_budgets))

    @classmethod
    def even(cls, budget: Price, slots: int = 24, slot_duration_ms: int = 3_600_000) -> "SlotPlan":
        base = int(budget) // slots
        rem = int(budget) - base * slots
        budgets = tuple(Price(base + (1 if i < rem else 0)) for i in range(slots))
        return cls(slot_budgets=budgets, slot_duration_ms=slot_duration_ms)


def plan_slots(
    items_per_slot: Sequence[Sequence[tuple[float, int]]],
    slot_budgets: Sequence[int],
) -> list[list[int]]:
    """Select items (value, cost-in-ticks) per slot by exact 0/1 knapsack.

    Returns the selected item indices per slot, value-maximal under each
    slot budget. Costs and budgets are integer ticks; very large budgets
    would need an infeasible DP table and raise with advice to use coarser
    ticks.
    """
    if len(items_per_slot) != len(slot_budgets):
        raise PacingError("one item list per slot budget required")
    selections: list[list[int]] = []
    for items, budget in zip(items_per_slot, slot_budgets):
        budget = int(budget)
        if budget < 0:
            raise PacingError("slot budget must be non-negative")
        if (budget + 1) * max(len(items), 1) > DP_TABLE_LIMIT:
            raise PacingError(
                "knapsack table too large; rescale prices to coarser ticks"
            )
        selections.append(_knapsack(items, budget))
    return selections


def _knapsack(items: Sequence[tuple[float, int]], budget: int) -> list[int]:
    best = np.zeros(budget + 1)
    take: list[np.ndarray] = []
    for value, cost in items:
        cost = int(cost)
        if value < 0:
            raise PacingError("item values must be non-negative")
        taken = np.zeros(budget + 1, dtype=bool)
        if cost <= budget:
            candidate = np.empty(budget + 1)
            candidate[:cost] = -1.0
            candidate[cost:] = best[: budget + 1 - cost] + value
            improve = candidate > best + 1e-12
            best = np.where(improve, candidate, best)
            taken = improve
        take.append(taken)
    chosen: list[int] = []
    remaining = int(np.argmax(best))
    for i in range(len(items) - 1, -1, -1):
        if take[i][remaining]:
            chosen.append(i)
            remaining -= int(items[i][1])
    return sorted(chosen)


@dataclass
class PacingState:
    """Throttling state: the participation probability plus the current
    slot's observations."""

    pacing_rate: float = 1.0
    spend: float = 0.0
    requests: int = 0
    wins: int = 0
    entered: int = 0
    warnings: int = 0

    def __post_init__(self):
        self.pacing_rate = min(max(self.pacing_rate, 0.0), 1.0)

    @property
    def win_rate(self) -> float:
        return self.wins / self.entered if self.entered else 0.0

    def observe(self, participated: bool, won: bool, cost: float):
        self.requests += 1
        if participated:
            self.entered += 1
            if won:
                self.wins += 1
                self.spend += cost

    def reset_slot(self):
        self.spend = 0.0
        self.requests = 0
        self.wins = 0
        self.entered = 0


def update_pacing_rate(
    state: PacingState,
    next_slot_budget: float,
    forecast_requests: Optional[float] = None,
    forecast_win_rate: Optional[float] = None,
) -> float:
    """rate(t+1) = rate(t) * (b_{t+1} / s(t)) * (reqs(t) / reqs(t+1))
    * (win_rate(t) / win_rate(t+1)), clamped to [0, 1].

    Forecasts default to the current slot's values (persistence). A zero
    denominator holds the previous rate and counts a warning.
    """
    reqs_next = state.requests if forecast_requests is None else forecast_requests
    wr_next = state.win_rate if forecast_win_rate is None else forecast_win_rate
    if state.spend <= 0 or reqs_next <= 0 or wr_next <= 0 or state.requests <= 0 or state.win_rate <= 0:
        state.warnings += 1
        return state.pacing_rate
    rate = (
        state.pacing_rate
        * (next_slot_budget / state.spend)
        * (state.requests / reqs_next)
        * (state.win_rate / wr_next)
    )
    state.pacing_rate = min(max(rate, 0.0), 1.0)
    return state.pacing_rate


def throttle(state: PacingState, rng: np.random.Generator) -> bool:
    """Bernoulli(pacing_rate) participation draw."""
    if state.pacing_rate >= 1.0:
        return True
    if state.pacing_rate <= 0.0:
        return False
    return bool(rng.random() < state.pacing_rate)


@dataclass
class PidController:
    """PID control of a campaign KPI toward reference x_r.

    The integral accumulator is clamped (anti-windup): unbounded windup
    destabilises the exponential actuator.
    """

    kp: float
    ki: float
    kd: float
    reference: float
    integral_cap: float = math.inf
    integral: float = 0.0
    last_error: float = 0.0
    last_time: float = 0.0

    def signal(self, x: float, t: float) -> float:
        return pid_signal(self, x, t)


def pid_signal(controller: PidController, x: float, t: float) -> float:
    """phi = kp * e + ki * sum e dt + kd * de/dt for e = reference - x."""
    dt = t - controller.last_time
    if dt <= 0:
        raise PacingError("timestamps must be strictly increasing")
    e = controller.reference - x
    integral = controller.integral + e * dt
    cap = controller.integral_cap
    controller.integral = min(max(integral, -cap), cap)
    derivative = (e - controller.last_error) / dt
    controller.last_error = e
    controller.last_time = t
    return controller.kp * e + controller.ki * controller.integral + controller.kd * derivative


def pid_actuate(bid: Price, phi: float, max_bid: Optional[Price] = None) -> Price:
    """Adjusted bid b * exp(phi), floored to ticks and clamped to [0, max_bid]."""
    factor = math.exp(min(phi, 100.0))
    adjusted = int(math.floor(int(bid) * factor))
    if max_bid is not None:
        adjusted = min(adjusted, int(max_bid))
    return Price(max(adjusted, 0))
