"""Bidding strategies: mapping estimated CTR (and a cost model) to a bid
price, the budget-exhausting multiplier solver, and the multi-campaign
arbitrage meta-bidder.

Bids are computed in float space and rounded down to integer ticks at the
boundary. Replay uses upper-bound budget accounting: a bid is suppressed
whenever the remaining budget could not cover the bid itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Price

LAMBDA_SPEND_REL_TOL = 1e-4


class BiddingError(ValueError):
    pass


@dataclass(frozen=True)
class UtilitySpec:
    """Per-impression utility: u = r for a clicks KPI, u = value*r - z for a
    profit KPI (value is the advertiser's worth of one click)."""

    kind: str = "clicks"
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("clicks", "profit"):
            raise BiddingError(f"unknown utility kind {self.kind!r}")
        if self.kind == "profit" and self.value <= 0:
            raise BiddingError("profit utility needs a positive click value")

    def utility(self, r: float, z: float = 0.0) -> float:
        if self.kind == "clicks":
            return r
        return self.value * r - z


def _to_ticks(b: float) -> Price:
    return Price(max(int(math.floor(b)), 0))


def bid_truthful(r: float, value: float) -> Price:
    """Bid the impression value: b = value * r."""
    return _to_ticks(value * r)


def bid_linear(r: float, value: float, phi: float) -> Price:
    """Linear-in-CTR bid: b = phi * value * r."""
    return _to_ticks(phi * value * r)


def bid_ortb1_float(u: float, lam: float, l: float) -> float:
    if lam <= 0 or l <= 0:
        raise BiddingError("ortb1 needs lam > 0 and l > 0")
    if u <= 0:
        return 0.0
    return math.sqrt(u * l / lam + l * l) - l


def bid_ortb1(u: float, lam: float, l: float) -> Price:
    """Concave non-linear bid b = sqrt(u*l/lam + l^2) - l, optimal when the
    win curve is b/(b+l) and the bidder pays its own bid."""
    return _to_ticks(bid_ortb1_float(u, lam, l))


def bid_ortb2_float(u: float, lam: float) -> float:
    if lam <= 0:
        raise BiddingError("ortb2 needs lam > 0")
    return max(u, 0.0) / lam


def bid_ortb2(u: float, lam: float) -> Price:
    """Linear bid b = u / lam, optimal under second-price expected cost."""
    return _to_ticks(bid_ortb2_float(u, lam))


def bid_lift(theta: float, delta_theta: float, value: float) -> Price:
    """Lift-based bid b = value * delta_theta, paying only for the
    conversion-rate increase the impression causes."""
    if not 0.0 <= delta_theta <= theta <= 1.0:
        raise BiddingError("need 0 <= delta_theta <= theta <= 1")
    return _to_ticks(value * delta_theta)


# ---------------------------------------------------------------------------
# Replay with upper-bound budget accounting
# ---------------------------------------------------------------------------


@dataclass
class ReplayResult:
    wins: int
    expected_clicks: float
    spend: int
    entered: int

    def as_tuple(self):
        return (self.wins, self.expected_clicks, self.spend)


def replay(
    bids: Sequence[float],
    market_prices: Sequence[float],
    ctrs: Sequence[float],
    budget: float,
    price_rule: str = "second",
) -> ReplayResult:
    """Sequentially replay bids against logged market prices.

    Ties lose. A bid is suppressed when the remaining budget is below the
    bid itself (cost upper bound), so spend can never exceed the budget.
    Clicks are counted in expectation (the sum of CTRs over won
    impressions), which makes replay deterministic.
    """
    if price_rule not in ("first", "second"):
        raise BiddingError(f"unknown price rule {price_rule!r}")
    remaining = float(budget)
    wins = 0
    entered = 0
    clicks = 0.0
    spend = 0.0
    for b, z, r in zip(bids, market_prices, ctrs):
        b = float(math.floor(b))
        if b <= 0 or b > remaining:
            continue
        entered += 1
        if b > z:
            pay = b if price_rule == "first" else z
            remaining -= pay
            spend += pay
            wins += 1
            clicks += r
    return ReplayResult(wins=wins, expected_clicks=clicks, spend=int(round(spend)), entered=entered)


def tune_phi(
    ctrs: Sequence[float],
    market_prices: Sequence[float],
    value: float,
    budget: float,
    price_rule: str = "second",
    grid: Optional[Sequence[float]] = None,
) -> float:
    """Grid-search the linear multiplier phi that maximises replayed clicks
    subject to spend <= budget on the training log.

    The default grid spans [0, 8] with 25 log-spaced positive points; the
    grid always contains 0 so a zero budget resolves to phi = 0.
    """
    if budget < 0:
        raise BiddingError("budget must be non-negative")
    if grid is None:
        grid = [0.0] + list(np.geomspace(1e-3, 8.0, 25))
    r = np.asarray(ctrs, dtype=float)
    z = np.asarray(market_prices, dtype=float)
    best_phi = None
    best = (-1.0, 0.0)
    for phi in grid:
        res = replay(phi * value * r, z, r, budget, price_rule)
        if res.spend <= budget and (res.expected_clicks, phi) > best:
            best = (res.expected_clicks, phi)
            best_phi = phi
    if best_phi is None:
        raise BiddingError("no feasible phi: every candidate overspends the budget")
    if best[0] <= 0.0:
        return 0.0  # nothing to win: don't bid at all
    return float(best_phi)


def solve_phi_for_spend(
    ctrs: Sequence[float],
    market_prices: Sequence[float],
    value: float,
    budget: float,
    price_rule: str = "second",
    rel_tol: float = 0.005,
) -> float:
    """Find the smallest linear multiplier phi whose replayed spend exhausts
    the budget; used when strategies are compared at equal spend. Larger
    phi values also exhaust it (spend is capped by the budget), but
    overpay; the boundary phi is the selective one."""
    r = np.asarray(ctrs, dtype=float)
    z = np.asarray(market_prices, dtype=float)

    def exhausts(phi: float) -> bool:
        return replay(phi * value * r, z, r, budget, price_rule).spend >= (1.0 - rel_tol) * budget

    hi = 1.0
    while not exhausts(hi) and hi < 1e6:
        hi *= 2.0
    if not exhausts(hi):
        return hi  # even huge multipliers cannot spend the budget
    lo = 1e-9
    if exhausts(lo):
        return lo
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if exhausts(mid):
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# Lagrange multiplier solving
# ---------------------------------------------------------------------------


def cost_first_price(win) -> Callable[[float], float]:
    """Cost model c(b) = b: the winner pays its own bid."""
    return lambda b: b


def cost_second_price(win) -> Callable[[float], float]:
    """Cost model c(b) = integral_0^b z p_z(z) dz = b w(b) - integral_0^b w,
    derived from the win curve by parts."""
    return lambda b: b * win(b) - win.integral(b)


@dataclass
class LambdaResult:
    lam: float
    expected_spend: float
    attainable: bool  # False when the budget cannot be spent even at lam -> 0+


def solve_lambda(
    win,
    cost: Callable[[float], float],
    ctr_sample: Sequence[float],
    budget: float,
    volume: int,
    bid_family: Callable[[float, float], float],
    rel_tol: float = LAMBDA_SPEND_REL_TOL,
    max_iters: int = 200,
) -> LambdaResult:
    """Bisect the multiplier lam so the planned spend just exhausts the
    budget: volume * mean_r[ c(b(r, lam)) * w(b(r, lam)) ] = budget.

    Spend decreases monotonically in lam, which makes bisection safe. If
    even a tiny lam cannot spend the budget, the boundary lam is returned
    with ``attainable=False``.
    """
    sample = np.asarray(ctr_sample, dtype=float)
    if sample.size == 0:
        raise BiddingError("empty CTR sample")
    if budget <= 0 or volume <= 0:
        raise BiddingError("budget and volume must be positive")

    def spend_of_bid(b: float) -> float:
        return cost(b) * win(b) if b > 0 else 0.0

    def planned_spend(lam: float) -> float:
        try:  # vectorised families (and cost/win models) take the fast path
            bids = np.asarray(bid_family(sample, lam), dtype=float)
            if bids.shape != sample.shape:
                raise TypeError
            spends = np.asarray(cost(bids), dtype=float) * np.asarray(win(bids), dtype=float)
            total = float(np.where(bids > 0, spends, 0.0).sum())
        except (TypeError, ValueError):
            total = sum(spend_of_bid(bid_family(float(r), lam)) for r in sample)
        return volume * total / sample.size

    lo = 1e-12
    if planned_spend(lo) < budget:
        return LambdaResult(lam=lo, expected_spend=planned_spend(lo), attainable=False)
    hi = 1.0
    while planned_spend(hi) > budget:
        hi *= 2.0
        if hi > 1e15:
            break
    for _ in range(max_iters):
        mid = math.sqrt(lo * hi)  # geometric midpoint: lam spans decades
        s = planned_spend(mid)
        if abs(s - budget) <= rel_tol * budget:
            return LambdaResult(lam=mid, expected_spend=s, attainable=True)
        if s > budget:
            lo = mid
        else:
            hi = mid
    mid = math.sqrt(lo * hi)
    return LambdaResult(lam=mid, expected_spend=planned_spend(mid), attainable=True)


# ---------------------------------------------------------------------------
# Strategy configuration used by the simulator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BiddingStrategy:
    """Config-level strategy: kind + parameters.

    kinds: truthful(value), linear(value, phi), ortb1(lam, l, value),
    ortb2(lam, value), lift(value). ORTB utilities are u = value * r; lam
    may be solved separately and injected.
    """

    kind: str
    value: float = 0.0
    phi: float = 1.0
    lam: float = 1.0
    l: float = 1.0

    def __post_init__(self):
        if self.kind not in ("truthful", "linear", "ortb1", "ortb2", "lift"):
            raise BiddingError(f"unknown strategy kind {self.kind!r}")
        if self.kind in ("ortb1", "ortb2") and self.lam <= 0:
            raise BiddingError("lam must be positive")
        if self.kind == "ortb1" and self.l <= 0:
            raise BiddingError("l must be positive")

    def bid(self, r: float) -> Price:
        if self.kind == "truthful":
            return bid_truthful(r, self.value)
        if self.kind == "linear":
            return bid_linear(r, self.value, self.phi)
        if self.kind == "ortb1":
            return bid_ortb1(self.value * r, self.lam, self.l)
        if self.kind == "ortb2":
            return bid_ortb2(self.value * r, self.lam)
        return bid_lift(1.0, r, self.value)  # lift: r carries delta_theta

    def bid_float(self, r: float) -> float:
        if self.kind == "truthful":
            return self.value * r
        if self.kind == "linear":
            return self.phi * self.value * r
        if self.kind == "ortb1":
            return bid_ortb1_float(self.value * r, self.lam, self.l)
        if self.kind == "ortb2":
            return bid_ortb2_float(self.value * r, self.lam)
        return self.value * r


# ---------------------------------------------------------------------------
# Multi-campaign statistical arbitrage (EM)
# ---------------------------------------------------------------------------


@dataclass
class ArbitrageCampaign:
    """One campaign on the trading desk: per-impression utility sample (in
    ticks) and its win curve."""

    name: str
    utilities: np.ndarray
    win: object  # anything exposing __call__ and .integral


@dataclass
class ArbitrageResult:
    s: np.ndarray
    lam: float
    expected_profit: float
    expected_cost: float
    converged: bool
    iterations: int
    objective_trace: list[float] = field(default_factory=list)


def arbitrage_bid(u: float, lam: float, l: float) -> float:
    """Surplus-optimal first-price bid for the meta-bidder: the maximiser of
    (u - (1 + lam) b) w(b) under w(b) = b / (b + l)."""
    if u <= 0:
        return 0.0
    return bid_ortb1_float(u / (1.0 + lam), 1.0, l)


def _win_scale(win) -> float:
    l = getattr(win, "l", None)
    if l is None and hasattr(win, "params"):
        l = win.params.get("l")
    if l is None:
        raise BiddingError("arbitrage campaigns need a parametric win curve (l)")
    return float(l)


def _campaign_moments(c: ArbitrageCampaign, lam: float) -> tuple[float, float, float]:
    """(mean profit, second moment of profit, mean cost) per auction."""
    l = _win_scale(c.win)
    mean_p = mom2 = mean_c = 0.0
    for u in c.utilities:
        b = arbitrage_bid(float(u), lam, l)
        w = c.win(b) if b > 0 else 0.0
        surplus = u - b
        mean_p += surplus * w
        mom2 += surplus * surplus * w
        mean_c += b * w
    n = len(c.utilities)
    return mean_p / n, mom2 / n, mean_c / n


def arbitrage_em(
    campaigns: Sequence[ArbitrageCampaign],
    budget: float,
    volume: int,
    max_iters: int = 50,
    var_target: Optional[float] = None,
    rel_tol: float = 1e-5,
) -> ArbitrageResult:
    """Alternate between allocating traffic across campaigns (E-step) and
    re-solving the shared bid multiplier to exhaust the budget (M-step).

    The risk constraint Var[R] = var_target applies in the E-step; by
    default it is dropped (None), which concentrates traffic on the most
    profitable campaign. Profit and cost use first-price (bid-as-cost)
    accounting. Non-convergence returns the best iterate with a flag.
    """
    m = len(campaigns)
    if m < 1:
        raise BiddingError("need at least one campaign")
    if budget <= 0 or volume <= 0:
        raise BiddingError("budget and volume must be positive")
    s = np.full(m, 1.0 / m)
    lam = 1.0
    trace: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        # M-step: spend the budget given s
        lam = _solve_arbitrage_lambda(campaigns, s, budget, volume)
        mu = np.empty(m)
        m2 = np.empty(m)
        cost = np.empty(m)
        for i, c in enumerate(campaigns):
            mu[i], m2[i], cost[i] = _campaign_moments(c, lam)
        # E-step: reallocate traffic
        s = _optimize_allocation(mu, m2, var_target)
        obj = volume * float(s @ mu)
        trace.append(obj)
        if len(trace) > 1:
            prev = trace[-2]
            if abs(obj - prev) <= rel_tol * max(abs(prev), 1e-12):
                converged = True
                break
    lam = _solve_arbitrage_lambda(campaigns, s, budget, volume)
    mu = np.empty(m)
    cost = np.empty(m)
    for i, c in enumerate(campaigns):
        mu[i], _, cost[i] = _campaign_moments(c, lam)
    return ArbitrageResult(
        s=s,
        lam=lam,
        expected_profit=volume * float(s @ mu),
        expected_cost=volume * float(s @ cost),
        converged=converged,
        iterations=it,
        objective_trace=trace,
    )


def _solve_arbitrage_lambda(campaigns, s, budget, volume) -> float:
    """Solve E[C] = B for the shared multiplier. The bid family is
    parametrised by t = 1 + lam > 0; spend decreases in t, and t < 1
    (lam < 0) deliberately overspends past the surplus optimum when the
    equality constraint demands it."""

    def spend(t: float) -> float:
        total = 0.0
        for si, c in zip(s, campaigns):
            if si <= 0:
                continue
            _, _, mean_c = _campaign_moments(c, t - 1.0)
            total += si * mean_c
        return volume * total

    lo, hi = 1e-9, 1.0
    while spend(hi) > budget and hi < 1e12:
        hi *= 2.0
    while spend(lo) < budget and lo > 1e-15:
        lo /= 2.0
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if spend(mid) > budget:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi) - 1.0


def _optimize_allocation(mu: np.ndarray, m2: np.ndarray, var_target: Optional[float]) -> np.ndarray:
    m = len(mu)
    if var_target is None:
        s = np.zeros(m)
        s[int(np.argmax(mu))] = 1.0
        return s
    if m == 1:
        return np.ones(1)

    def variance(s):
        mean = float(s @ mu)
        return float(s @ m2) - mean * mean

    if m == 2:
        ts = np.linspace(0.0, 1.0, 2001)
        best_t, best_obj = None, -math.inf
        for t in ts:
            s = np.array([t, 1.0 - t])
            if variance(s) <= var_target + 1e-12:
                obj = float(s @ mu)
                if obj > best_obj:
                    best_obj, best_t = obj, t
        if best_t is None:  # no feasible point: take minimal variance
            best_t = min(ts, key=lambda t: variance(np.array([t, 1.0 - t])))
        return np.array([best_t, 1.0 - best_t])

    from scipy import optimize

    cons = [
        {"type": "eq", "fun": lambda s: float(np.sum(s)) - 1.0},
        {"type": "ineq", "fun": lambda s: var_target - variance(s)},
    ]
    res = optimize.minimize(
        lambda s: -float(s @ mu),
        x0=np.full(m, 1.0 / m),
        bounds=[(0.0, 1.0)] * m,
        constraints=cons,
        method="SLSQP",
    )
    s = np.clip(res.x, 0.0, None)
    total = s.sum()
    return s / total if total > 0 else np.full(m, 1.0 / m)
