"""Publisher-side reserve price optimisation.

Payoff evaluation, the optimal-auction fixed point, a multiplicative
explore/backoff heuristic, and a staged regret-minimising explorer that
learns from observed revenues only.

The regret explorer works on prices normalised to [0, 1]; callers convert
ticks at the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Price


class PricingError(ValueError):
    pass


def reserve_payoff(b1, b2, alpha):
    """Second-price payoff with reserve alpha for descending bids b1 >= b2:
    alpha when it lands between the bids, b2 when it binds nothing, zero
    when it blocks the sale."""
    if b2 > b1:
        raise PricingError("bids must be in descending order")
    if b1 >= alpha > b2:
        return alpha
    if b2 >= alpha:
        return b2
    return 0


def optimal_reserve(
    cdf: Callable[[float], float],
    pdf: Callable[[float], float],
    v_publisher: float = 0.0,
    bracket: tuple[float, float] = (1e-9, 1.0),
    tol: float = 1e-9,
) -> float:
    """Solve alpha = (1 - F(alpha)) / F'(alpha) + v_P by bisection on
    g(alpha) = alpha - (1 - F)/F' - v_P within ``bracket``."""

    def g(a: float) -> float:
        density = pdf(a)
        if density <= 0:
            raise PricingError("density must be positive on the bracket")
        return a - (1.0 - cdf(a)) / density - v_publisher

    lo, hi = bracket
    glo, ghi = g(lo), g(hi)
    if glo == 0:
        return lo
    if ghi == 0:
        return hi
    if glo * ghi > 0:
        raise PricingError("fixed point not bracketed")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if gm == 0:
            return mid
        if (gm > 0) == (ghi > 0):
            hi, ghi = mid, gm
        else:
            lo, glo = mid, gm
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Explore/backoff heuristic
# ---------------------------------------------------------------------------


@dataclass
class ReserveState:
    """Current reserve and the auction history (alpha, b1, b2, payoff)."""

    alpha: Price
    history: list[tuple[int, int, int, int]] = field(default_factory=list)

    def observe(self, b1: Price, b2: Price) -> int:
        payoff = reserve_payoff(int(b1), int(b2), int(self.alpha))
        self.history.append((int(self.alpha), int(b1), int(b2), int(payoff)))
        return payoff


def heuristic_step(
    state: ReserveState,
    up_factor: float = 1.1,
    down_factor: float = 0.5,
) -> Price:
    """After a sale (top bid >= alpha) raise the reserve multiplicatively;
    after a blocked sale cut it toward the last observed top bid:

        sold:    alpha <- floor(alpha * up_factor)
        unsold:  alpha <- floor(b1 + down_factor * (alpha - b1))

    Prices stay in integer ticks (rounded down).
    """
    if not state.history:
        raise PricingError("need at least one observed auction")
    alpha, b1, _, _ = state.history[-1]
    if b1 >= alpha:
        new_alpha = math.floor(alpha * up_factor)
    else:
        new_alpha = math.floor(b1 + down_factor * (alpha - b1))
    state.alpha = Price(max(new_alpha, 0))
    return state.alpha


# ---------------------------------------------------------------------------
# Staged regret-minimising explorer
# ---------------------------------------------------------------------------


def bid_distribution_diagnostic(bids: Sequence[float], bins: int = 20) -> dict:
    """Chi-squared goodness-of-fit of observed bids against fitted uniform
    and log-normal hypotheses, using equiprobable bins under each fitted
    hypothesis so every bin carries the same expected count. Diagnostic
    report only; on real exchange data both hypotheses usually fail.
    """
    arr = np.asarray([float(b) for b in bids])
    if arr.size < bins * 5:
        raise PricingError("need at least 5 observations per bin")
    if np.any(arr < 0):
        raise PricingError("bids must be non-negative")
    from scipy import stats as _stats

    def chi2_against(edges: np.ndarray, data: np.ndarray, fitted_params: int) -> dict:
        observed, _ = np.histogram(data, bins=edges)
        expected = data.size / (len(edges) - 1)
        chi2 = float(np.sum((observed - expected) ** 2 / expected))
        dof = max(len(edges) - 2 - fitted_params, 1)
        return {"chi2": chi2, "p_value": float(_stats.chi2.sf(chi2, dof))}

    out = {"n": int(arr.size)}
    lo, hi = float(arr.min()), float(arr.max())
    uniform_edges = np.linspace(lo, hi, bins + 1)
    uniform_edges[-1] += 1e-9
    out["uniform"] = chi2_against(uniform_edges, arr, fitted_params=2)

    pos = arr[arr > 0]
    if pos.size >= bins * 5:
        logs = np.log(pos)
        mu, sigma = float(logs.mean()), max(float(logs.std(ddof=0)), 1e-9)
        qs = np.linspace(0.0, 1.0, bins + 1)
        edges = _stats.lognorm.ppf(qs, sigma, scale=math.exp(mu))
        edges[0], edges[-1] = 0.0, max(edges[-2] * 10, hi + 1.0)
        entry = chi2_against(edges, pos, fitted_params=2)
        entry.update({"mu": mu, "sigma": sigma})
        out["lognormal"] = entry
    return out


def iid_bidder_no_sale_prob(q: np.ndarray, bidders: int) -> np.ndarray:
    """Map the second-price CDF value q = F2(alpha) to the no-sale
    probability P(top bid <= alpha) under ``bidders`` i.i.d. bidders.

    With per-bidder value CDF F: F2 = F^K + K F^(K-1) (1 - F), which is
    monotone in F, so F is recovered by bisection and P(no sale) = F^K.
    """
    if bidders < 2:
        raise PricingError("need at least two bidders for the i.i.d. map")
    q = np.clip(np.asarray(q, dtype=float), 0.0, 1.0)
    lo = np.zeros_like(q)
    hi = np.ones_like(q)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        val = mid**bidders + bidders * mid ** (bidders - 1) * (1.0 - mid)
        too_low = val < q
        lo = np.where(too_low, mid, lo)
        hi = np.where(too_low, hi, mid)
    f = 0.5 * (lo + hi)
    return f**bidders


@dataclass
class RegretMinimizerState:
    """Stage state of the reserve explorer.

    Stage 1 plays alpha = 0 and observes raw second prices; later stages
    play the learned alpha. Observed revenues equal the second price
    whenever it is at least the played reserve; lower ones are recorded as
    censored placeholders at the reserve, which keeps the empirical CDF
    exact on [alpha, 1] where candidates live. Stage lengths double.

    ``bidders=None`` uses the identity in place of the undefined
    beta-inverse map (revenue estimate E[B2 | B2 > alpha]: never raises the
    reserve, exploration-free); an integer uses the i.i.d.-bidders CDF map,
    which makes the estimate the empirical expected revenue.
    """

    a: float = 0.1
    delta: float = 0.05
    stage_bound: int = 10
    first_stage_length: int = 1000
    bidders: Optional[int] = 2
    grid_size: int = 256
    rule: str = "argmax"
    stage: int = 0
    alpha_hat: float = 0.0
    empty_candidate_flags: int = 0
    _observations: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.a <= 1:
            raise PricingError("approximation parameter a must be in (0, 1]")
        if not 0 < self.delta <= 1:
            raise PricingError("confidence delta must be in (0, 1]")
        if self.rule not in ("argmax", "confidence_min"):
            raise PricingError(f"unknown selection rule {self.rule!r}")

    @property
    def current_alpha(self) -> float:
        """Reserve to play now (0 during stage 1)."""
        return 0.0 if self.stage == 0 else self.alpha_hat

    def next_stage_length(self) -> int:
        return self.first_stage_length * (2**self.stage)

    # -- empirical quantities over pooled pseudo-observations ---------------

    def _cdf(self, alphas: np.ndarray) -> np.ndarray:
        obs = np.sort(np.asarray(self._observations))
        return np.searchsorted(obs, alphas, side="right") / len(obs)

    def _mu(self, alphas: np.ndarray, t_i: int) -> tuple[np.ndarray, np.ndarray]:
        """Revenue estimate mu(alpha) and confidence width C(alpha)."""
        obs = np.asarray(self._observations)
        mean_b2 = float(obs.mean())
        cdf = self._cdf(alphas)
        integral = np.array([np.maximum(a - obs, 0.0).mean() for a in alphas])
        if self.bidders is None:
            no_sale = cdf
        else:
            no_sale = iid_bidder_no_sale_prob(cdf, self.bidders)
        mu = mean_b2 + integral - alphas * no_sale
        log_term = math.log(6.0 * self.stage_bound / self.delta)
        with np.errstate(divide="ignore"):
            conf = alphas * np.sqrt(np.where(cdf < 1.0, 2.0 / ((1.0 - cdf) * t_i), np.inf) * log_term)
        return mu, conf


def regret_stage(state: RegretMinimizerState, revenues: Sequence[float]) -> RegretMinimizerState:
    """Consume one stage of observed revenues (normalised to [0, 1]) and
    advance the reserve estimate within [alpha_hat, 1] under the
    F_hat <= 1 - a cap.

    Selection rules: "argmax" takes the grid candidate with the best
    revenue estimate; "confidence_min" takes the smallest candidate whose
    estimate is within twice the confidence width of the best (the
    conservative staged rule). An empty candidate set keeps the previous
    reserve and raises a flag counter.
    """
    revs = [float(r) for r in revenues]
    if not revs:
        raise PricingError("stage revenues must be non-empty")
    if any(r < 0 or r > 1 for r in revs):
        raise PricingError("revenues must be normalised to [0, 1]")
    played = state.current_alpha
    t_i = len(revs)
    # revenues above the played reserve are exact second prices; the rest
    # only reveal that the second price was below the reserve
    state._observations.extend(r if r > played else played for r in revs)

    grid = np.linspace(state.alpha_hat, 1.0, state.grid_size)
    mu, conf = state._mu(grid, t_i)
    cdf = state._cdf(grid)
    explorable = cdf < 1.0 - state.a
    capped = cdf <= 1.0 - state.a
    if not np.any(explorable):
        state.empty_candidate_flags += 1
        state.stage += 1
        return state
    best_idx = int(np.argmax(np.where(explorable, mu, -np.inf)))
    if state.rule == "argmax":
        state.alpha_hat = float(grid[best_idx])
    else:
        threshold = mu[best_idx] - 2.0 * conf[best_idx] - 2.0 * conf
        eligible = (mu >= threshold) & capped
        if not np.any(eligible):
            state.empty_candidate_flags += 1
        else:
            state.alpha_hat = float(grid[int(np.argmax(eligible))])
    state.stage += 1
    return state
