"""Synthetic-market simulation engine.

Generates a market stream (market price, ground-truth CTR, and the noisy
CTR estimate the bidder actually sees), calibrates strategies on a
training stream, and replays campaigns through the auction loop with
budget accounting and optional pacing. The per-auction event loop mirrors
the exchange flow: request -> (throttle) -> bid -> auction -> win notice ->
pay -> user feedback.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bidding import (
    BiddingStrategy,
    cost_first_price,
    cost_second_price,
    replay,
    solve_lambda,
    solve_phi_for_spend,
    tune_phi,
)
from .core import AuctionResult, MetricsReport, Price, compute_metrics, seeded_rng
from .exchange import FloorPolicy, run_first_price, run_second_price
from .landscape import UniformWin, WinFunction
from .pacing import PacingState, PidController, throttle, update_pacing_rate

# the aggregated competing market bids under this id; it sorts before any
# campaign name so price ties go to the market (ties lose)
MARKET_BIDDER = "!market"

# Equal-spend calibrations overshoot by this margin so that small
# train/eval market drift cannot leave a strategy under-spent: every
# campaign then exhausts its budget and comparisons happen at equal spend.
CALIBRATION_MARGIN = 0.25


class SimError(ValueError):
    pass


@dataclass(frozen=True)
class MarketSpec:
    """Synthetic market: market price, true CTR and CTR-estimate noise.

    ctr_params may carry ``noise_sigma``: the bidder sees
    r_est = r_true * exp(N(0, sigma^2) - sigma^2/2) clipped to [0, 1],
    while clicks are drawn from r_true.
    """

    volume: int
    price_kind: str = "uniform"  # uniform | lognormal | heavy_tail | empirical
    price_params: dict = field(default_factory=lambda: {"high": 100.0})
    ctr_kind: str = "beta"  # beta | uniform
    ctr_params: dict = field(default_factory=lambda: {"a": 2.0, "b": 48.0, "scale": 1.0})
    auction_type: str = "second"  # second | first
    slots: int = 24
    floor_hard: int = 0
    floor_soft: Optional[int] = None

    def __post_init__(self):
        if self.volume < 1:
            raise SimError("volume must be positive")
        if self.auction_type not in ("first", "second"):
            raise SimError(f"unknown auction type {self.auction_type!r}")
        if self.price_kind not in ("uniform", "lognormal", "heavy_tail", "empirical"):
            raise SimError(f"unknown price kind {self.price_kind!r}")
        if self.ctr_kind not in ("beta", "uniform"):
            raise SimError(f"unknown ctr kind {self.ctr_kind!r}")
        if self.slots < 1:
            raise SimError("need at least one slot")

    @property
    def floor(self) -> FloorPolicy:
        return FloorPolicy(
            hard=Price(self.floor_hard),
            soft=None if self.floor_soft is None else Price(self.floor_soft),
        )


@dataclass(frozen=True)
class MarketStream:
    prices: np.ndarray  # market price per auction (float ticks)
    true_ctr: np.ndarray
    est_ctr: np.ndarray  # what the bidder sees


def generate_market(spec: MarketSpec, rng: np.random.Generator) -> MarketStream:
    p = spec.price_params
    if spec.price_kind == "uniform":
        z = rng.uniform(0.0, float(p["high"]), size=spec.volume)
    elif spec.price_kind == "lognormal":
        z = rng.lognormal(float(p["mu"]), float(p["sigma"]), size=spec.volume)
    elif spec.price_kind == "heavy_tail":
        # inverse-transform of w(z) = z / (z + l): matches the b/(b+l) win curve
        u = rng.uniform(0.0, 1.0, size=spec.volume)
        z = float(p["l"]) * u / (1.0 - u)
        z = np.minimum(z, float(p.get("cap", 1e7)))
    else:
        samples = np.asarray(p["samples"], dtype=float)
        z = samples[rng.integers(0, len(samples), size=spec.volume)]
    c = spec.ctr_params
    if spec.ctr_kind == "beta":
        r = rng.beta(float(c["a"]), float(c["b"]), size=spec.volume) * float(c.get("scale", 1.0))
    else:
        r = rng.uniform(float(c.get("low", 0.0)), float(c.get("high", 1.0)), size=spec.volume)
    r = np.clip(r, 0.0, 1.0)
    sigma = float(c.get("noise_sigma", 0.0))
    if sigma > 0:
        est = r * np.exp(rng.normal(0.0, sigma, size=spec.volume) - 0.5 * sigma * sigma)
        est = np.clip(est, 0.0, 1.0)
    else:
        est = r.copy()
    return MarketStream(prices=z, true_ctr=r, est_ctr=est)


def fit_market_win_function(z_train: np.ndarray, spec: MarketSpec) -> object:
    """Win curve used for planning (lambda solving) fitted on training
    market prices: the analytic curve for uniform markets, otherwise the
    b/(b+l) curve with l at the empirical median (its half-win point)."""
    if spec.price_kind == "uniform":
        return UniformWin(high=float(spec.price_params["high"]))
    median = float(np.median(z_train))
    return WinFunction.parametric(max(median, 1.0))


@dataclass(frozen=True)
class PacingConfig:
    kind: str = "none"  # none | throttle | pid
    # throttle
    initial_rate: float = 1.0
    # pid (controls per-slot eCPC toward reference_ecpc via exp bid scaling)
    reference_ecpc: float = 0.0
    kp: float = 0.0
    ki: float = 0.0
    kd: float = 0.0
    integral_cap: float = 5.0

    def __post_init__(self):
        if self.kind not in ("none", "throttle", "pid"):
            raise SimError(f"unknown pacing kind {self.kind!r}")


@dataclass(frozen=True)
class CampaignRun:
    name: str
    budget: int
    click_value: int
    strategy: BiddingStrategy
    pacing: PacingConfig = PacingConfig()


@dataclass
class SlotRow:
    campaign: str
    slot: int
    requests: int = 0
    entered: int = 0
    wins: int = 0
    spend: int = 0
    clicks: int = 0
    expected_clicks: float = 0.0
    pacing_rate: float = 1.0
    bid_scale: float = 1.0


@dataclass
class CampaignOutcome:
    name: str
    metrics: MetricsReport
    slot_rows: list[SlotRow]
    expected_clicks: float
    spend: int
    budget_exhausted_slot: Optional[int]


def resolve_strategy(
    spec: dict,
    market: MarketSpec,
    train: MarketStream,
    budget: float,
    click_value: float,
) -> BiddingStrategy:
    """Build a BiddingStrategy from config, solving "auto" parameters on the
    training stream: phi by replay grid search (clicks-max) or by
    equal-spend calibration ("spend"), lam by model-based budget bisection
    ("auto") or by equal-spend replay calibration ("spend")."""
    kind = spec["kind"]
    params = {k: v for k, v in spec.items() if k != "kind"}
    est, z_train = train.est_ctr, train.prices
    if kind == "truthful":
        return BiddingStrategy(kind="truthful", value=click_value)
    if kind == "linear":
        phi = params.get("phi", "auto")
        if phi == "auto":
            phi = tune_phi(est, z_train, click_value, budget, market.auction_type)
        elif phi == "spend":
            phi = solve_phi_for_spend(est, z_train, click_value, budget, market.auction_type)
            phi *= 1.0 + CALIBRATION_MARGIN
        return BiddingStrategy(kind="linear", value=click_value, phi=float(phi))
    if kind in ("ortb1", "ortb2"):
        win = fit_market_win_function(z_train, market)
        l = params.get("l", "auto")
        if l == "auto":
            l = getattr(win, "high", None) or win.params.get("l", 1.0)
        if kind == "ortb1":
            family = lambda r, lam_: _ortb1_family(click_value * r, lam_, float(l))
        else:
            family = lambda r, lam_: click_value * r / lam_
        lam = params.get("lam", "auto")
        if lam == "auto":
            cost = cost_first_price(win) if market.auction_type == "first" else cost_second_price(win)
            lam = solve_lambda(win, cost, est, budget, len(est), family).lam
        elif lam == "spend":
            lam = _solve_lam_for_spend(family, est, z_train, budget, market.auction_type)
            lam /= 1.0 + CALIBRATION_MARGIN  # same effective overshoot as the phi path
        return BiddingStrategy(kind=kind, value=click_value, lam=float(lam), l=float(l))
    raise SimError(f"unknown strategy kind {kind!r}")


def _ortb1_family(u: float, lam: float, l: float) -> float:
    if u <= 0:
        return 0.0
    return math.sqrt(u * l / lam + l * l) - l


def _solve_lam_for_spend(family, ctrs, market_prices, budget, price_rule, rel_tol=0.005) -> float:
    """The largest lam whose training replay still exhausts the budget.

    Spend as a function of lam rises from zero (bids so large that every
    one is suppressed by upper-bound accounting), plateaus at the budget,
    and falls off for large lam; the upper boundary of the plateau is the
    selective calibration point.
    """

    def exhausts(lam: float) -> bool:
        spend = replay(
            [family(float(r), lam) for r in ctrs], market_prices, ctrs, budget, price_rule
        ).spend
        return spend >= (1.0 - rel_tol) * budget

    seed_lam = None
    for cand in [2.0**k for k in range(0, 26)] + [2.0 ** (-k) for k in range(1, 26)]:
        if exhausts(cand):
            seed_lam = cand
            break
    if seed_lam is None:
        raise SimError("budget unattainable: no lam exhausts it on the training stream")
    lo = seed_lam
    hi = seed_lam * 2.0
    while exhausts(hi) and hi < 1e12:
        hi *= 2.0
    for _ in range(60):
        mid = math.sqrt(lo * hi)
        if exhausts(mid):
            lo = mid
        else:
            hi = mid
    return lo


def run_campaign(
    stream: MarketStream,
    run: CampaignRun,
    market: MarketSpec,
    rng: np.random.Generator,
) -> CampaignOutcome:
    """Replay one campaign through the market stream.

    Bids are computed from the CTR estimate; each auction runs through the
    exchange engine against the aggregated market bid (floored to ticks, so
    ties lose); clicks are drawn from the true CTR. Budget uses upper-bound
    accounting (a bid above the remaining budget is suppressed). Throttle
    pacing gates participation per slot via the pacing-rate recurrence; PID
    pacing scales bids by exp(signal) to drive the per-slot eCPC to its
    reference.
    """
    volume = len(stream.prices)
    slot_size = max(volume // market.slots, 1)
    remaining = float(run.budget)
    run_auction = run_first_price if market.auction_type == "first" else run_second_price
    floor = market.floor
    state = PacingState(pacing_rate=run.pacing.initial_rate if run.pacing.kind == "throttle" else 1.0)
    controller = None
    bid_scale = 1.0
    if run.pacing.kind == "pid":
        if run.pacing.reference_ecpc <= 0:
            raise SimError("pid pacing needs a positive reference_ecpc")
        # control the dimensionless ratio eCPC / reference so gain scales
        # are independent of the tick magnitude
        controller = PidController(
            kp=run.pacing.kp,
            ki=run.pacing.ki,
            kd=run.pacing.kd,
            reference=1.0,
            integral_cap=run.pacing.integral_cap,
        )
    slot_budget = run.budget / market.slots
    rows: list[SlotRow] = []
    outcomes: list[AuctionResult] = []
    exhausted_slot: Optional[int] = None
    expected_clicks_total = 0.0

    for slot in range(market.slots):
        lo = slot * slot_size
        hi = volume if slot == market.slots - 1 else (slot + 1) * slot_size
        row = SlotRow(campaign=run.name, slot=slot, pacing_rate=state.pacing_rate, bid_scale=bid_scale)
        for i in range(lo, hi):
            row.requests += 1
            participate = True
            if run.pacing.kind == "throttle":
                participate = throttle(state, rng)
            cost = 0.0
            won = False
            clicked = False
            if participate:
                bid = math.floor(run.strategy.bid_float(float(stream.est_ctr[i])) * bid_scale)
                if bid <= 0 or bid > remaining:
                    participate = False
                else:
                    row.entered += 1
                    outcome = run_auction(
                        {run.name: Price(bid), MARKET_BIDDER: Price(math.floor(stream.prices[i]))},
                        floor,
                    )
                    if outcome.winner == run.name:
                        won = True
                        cost = float(outcome.paying_price)
                        remaining -= cost
                        row.wins += 1
                        row.spend += int(cost)
                        row.expected_clicks += float(stream.true_ctr[i])
                        expected_clicks_total += float(stream.true_ctr[i])
                        clicked = bool(rng.random() < stream.true_ctr[i])
                        if clicked:
                            row.clicks += 1
            state.observe(participate, won, cost)
            outcomes.append(
                AuctionResult(
                    entered=participate,
                    won=won,
                    clicked=clicked,
                    converted=False,
                    cost=Price(int(round(cost))),
                )
            )
            if exhausted_slot is None and remaining < 0.01 * run.budget:
                exhausted_slot = slot  # >= 99% of the budget is spent
        rows.append(row)
        # end-of-slot pacing updates
        if run.pacing.kind == "throttle":
            update_pacing_rate(state, next_slot_budget=slot_budget)
            state.reset_slot()
        elif run.pacing.kind == "pid" and controller is not None:
            if row.expected_clicks > 0:
                ecpc = row.spend / row.expected_clicks
                phi = controller.signal(ecpc / run.pacing.reference_ecpc, float(slot + 1))
                bid_scale = math.exp(max(min(phi, 5.0), -5.0))
    metrics = compute_metrics(outcomes)
    return CampaignOutcome(
        name=run.name,
        metrics=metrics,
        slot_rows=rows,
        expected_clicks=expected_clicks_total,
        spend=int(metrics.spend),
        budget_exhausted_slot=exhausted_slot,
    )


def simulate(config: dict, seed: int) -> dict:
    """Run the full synthetic simulation described by a config dict.

    Returns {campaign name: CampaignOutcome}; deterministic given the seed.
    """
    market = market_from_config(config["market"])
    stream = generate_market(market, seeded_rng(seed, 0))
    calib_volume = int(config.get("calibration_volume", market.volume))
    calib_spec = MarketSpec(
        volume=calib_volume,
        price_kind=market.price_kind,
        price_params=market.price_params,
        ctr_kind=market.ctr_kind,
        ctr_params=market.ctr_params,
        auction_type=market.auction_type,
        slots=market.slots,
    )
    train = generate_market(calib_spec, seeded_rng(seed, 1))
    results: dict[str, CampaignOutcome] = {}
    for idx, camp in enumerate(config["campaigns"]):
        budget = int(camp["budget"])
        value = int(camp["click_value"])
        strategy = resolve_strategy(camp["strategy"], market, train, budget, value)
        pacing = pacing_from_config(camp.get("pacing", {"kind": "none"}))
        run = CampaignRun(
            name=camp["name"], budget=budget, click_value=value, strategy=strategy, pacing=pacing
        )
        results[run.name] = run_campaign(stream, run, market, seeded_rng(seed, 2, idx))
    return results


def market_from_config(cfg: dict) -> MarketSpec:
    price = dict(cfg.get("price", {"kind": "uniform", "high": 100.0}))
    ctr = dict(cfg.get("ctr", {"kind": "beta", "a": 2.0, "b": 48.0, "scale": 1.0}))
    soft = cfg.get("floor_soft")
    return MarketSpec(
        volume=int(cfg["volume"]),
        price_kind=price.pop("kind"),
        price_params=price,
        ctr_kind=ctr.pop("kind"),
        ctr_params=ctr,
        auction_type=cfg.get("auction", "second"),
        slots=int(cfg.get("slots", 24)),
        floor_hard=int(cfg.get("floor_hard", 0)),
        floor_soft=None if soft is None else int(soft),
    )


def pacing_from_config(cfg: dict) -> PacingConfig:
    return PacingConfig(
        kind=cfg.get("kind", "none"),
        initial_rate=float(cfg.get("initial_rate", 1.0)),
        reference_ecpc=float(cfg.get("reference_ecpc", 0.0)),
        kp=float(cfg.get("kp", 0.0)),
        ki=float(cfg.get("ki", 0.0)),
        kd=float(cfg.get("kd", 0.0)),
        integral_cap=float(cfg.get("integral_cap", 5.0)),
    )
