"""Bid landscape forecasting: win probability w(b), market-price density and
expected cost from (possibly right-censored) bid logs.

Four estimator families are provided: observation counting, the
Kaplan-Meier product-limit survival estimator, a per-sample log-normal
mixture, and censored linear regression. Losing auctions only reveal that
the market price was at least the bid, so naive counting over wins
overestimates the win probability; the survival estimator corrects this.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, special

from .core import BidLogRecord

_SIGMA_FLOOR = 1e-6  # degenerate zero-variance log-normal fits clamp here


class LandscapeError(ValueError):
    pass


@dataclass(frozen=True)
class SurvivalTable:
    """Rows (b_j, d_j, n_j): at bid level b_j, d_j cases resolved exactly at
    market price b_j - 1 and n_j cases were still unwinnable at bid b_j - 1."""

    rows: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        prev_b = None
        prev_n = None
        for b, d, n in self.rows:
            if prev_b is not None and b <= prev_b:
                raise LandscapeError("bid levels must be strictly increasing")
            if not 0 <= d <= n:
                raise LandscapeError("need 0 <= d_j <= n_j")
            if prev_n is not None and n > prev_n:
                raise LandscapeError("n_j must be non-increasing")
            prev_b, prev_n = b, n


def build_survival_table(logs: Sequence[BidLogRecord]) -> SurvivalTable:
    """Transform bid/win/price tuples into survival rows.

    A win at market price z means any bid above z would have won, so the
    case "dies" at level z + 1; a loss at bid b is censored: the market
    price is only known to be >= b (ties lose). At level b_j:

        d_j = wins with z == b_j - 1
        n_j = wins with z >= b_j - 1  +  losses with bid >= b_j

    Levels are the distinct bids and win resolutions present in the log;
    levels with no cases at risk are dropped.
    """
    if not logs:
        raise LandscapeError("no data")
    wins = [int(r.market_price) for r in logs if r.won]
    loss_bids = [int(r.bid) for r in logs if not r.won]
    levels = sorted({int(r.bid) for r in logs} | {z + 1 for z in wins})
    rows = []
    for b in levels:
        d = sum(1 for z in wins if z == b - 1)
        n = sum(1 for z in wins if z >= b - 1) + sum(1 for lb in loss_bids if lb >= b)
        if n > 0:
            rows.append((b, d, n))
    return SurvivalTable(rows=tuple(rows))


def win_prob_counting(logs: Sequence[BidLogRecord], bid: int) -> float:
    """Observation-only estimate: the share of observed market prices below
    the bid. Biased upward because losing auctions never enter the count."""
    wins = [int(r.market_price) for r in logs if r.won]
    if not wins:
        raise LandscapeError("no data")
    return sum(1 for z in wins if z < bid) / len(wins)


def win_prob_km_exact(table: SurvivalTable, bid: int) -> Fraction:
    """Kaplan-Meier win probability 1 - prod_{b_j <= bid} (n_j - d_j) / n_j,
    as an exact rational.

    The product runs over levels up to and including the bid: a win at bid
    b resolves cases priced exactly b - 1, which level b's own row counts.
    This reproduces the worked probabilities (0, 2/7, 13/28, 41/56) on the
    reference 8-record fixture.
    """
    surv = Fraction(1)
    for b, d, n in table.rows:
        if b <= bid:
            surv *= Fraction(n - d, n)
    return 1 - surv


def win_prob_km(table: SurvivalTable, bid: int) -> float:
    return float(win_prob_km_exact(table, bid))


def win_prob_parametric(l: float, bid: float) -> float:
    """w(b) = b / (b + l) for scale parameter l > 0."""
    if l <= 0:
        raise LandscapeError("scale parameter l must be positive")
    if bid <= 0:
        return 0.0
    return bid / (bid + l)


@dataclass(frozen=True)
class LognormalSample:
    """Log-normal price model for one targeting sample (a unique combination
    of targeted attributes), with its mixture weight within the campaign."""

    mu: float
    sigma: float
    weight: float = 1.0
    sample_key: str = ""

    def pdf(self, z: float) -> float:
        if z <= 0:
            return 0.0
        return math.exp(-((math.log(z) - self.mu) ** 2) / (2 * self.sigma**2)) / (
            z * self.sigma * math.sqrt(2 * math.pi)
        )


def fit_lognormal_sample(prices: Sequence[float], weight: float = 1.0) -> LognormalSample:
    """Moment-match a log-normal to observed winning prices:

        mu    = ln E - 0.5 ln(1 + Std^2 / E^2)
        sigma = sqrt(ln(1 + Std^2 / E^2))

    Constant prices give Std = 0; sigma is clamped to a small epsilon
    because the sample-partition scheme can legitimately produce them.
    """
    arr = np.asarray(prices, dtype=float)
    if arr.size < 2:
        raise LandscapeError("need at least two prices")
    if np.any(arr <= 0):
        raise LandscapeError("prices must be positive")
    mean = float(arr.mean())
    var = float(arr.var())
    ratio = 1.0 + var / mean**2
    mu = math.log(mean) - 0.5 * math.log(ratio)
    sigma = math.sqrt(math.log(ratio))
    return LognormalSample(mu=mu, sigma=max(sigma, _SIGMA_FLOOR), weight=weight)


def campaign_price_density(samples: Sequence[LognormalSample], z: float) -> float:
    """Campaign-level market price density: the weight-mixed sample densities."""
    total = sum(s.weight for s in samples)
    if abs(total - 1.0) > 1e-9:
        raise LandscapeError(f"mixture weights must sum to 1, got {total}")
    return sum(s.weight * s.pdf(z) for s in samples)


@dataclass
class CensoredFit:
    """Result of censored linear regression: coefficients and the per-iteration
    negative log-likelihood trace."""

    beta: np.ndarray
    sigma: float
    nll_history: list[float] = field(default_factory=list)


def censored_nll(
    beta: np.ndarray,
    won_x: np.ndarray,
    won_z: np.ndarray,
    lost_x: np.ndarray,
    lost_b: np.ndarray,
    sigma: float,
) -> float:
    """- sum_W log phi((z - beta.x)/sigma) - sum_L log Phi((beta.x - b)/sigma)."""
    nll = 0.0
    if len(won_z):
        u = (won_z - won_x @ beta) / sigma
        nll += float(np.sum(0.5 * u**2 + 0.5 * math.log(2 * math.pi)))
    if len(lost_b):
        v = (lost_x @ beta - lost_b) / sigma
        nll += float(-np.sum(special.log_ndtr(v)))
    return nll


def _censored_grad(beta, won_x, won_z, lost_x, lost_b, sigma):
    grad = np.zeros_like(beta)
    if len(won_z):
        u = (won_z - won_x @ beta) / sigma
        grad += -(won_x.T @ u) / sigma
    if len(lost_b):
        v = (lost_x @ beta - lost_b) / sigma
        # phi(v)/Phi(v), computed in log space to stay finite in the tail
        ratio = np.exp(-0.5 * v**2 - 0.5 * math.log(2 * math.pi) - special.log_ndtr(v))
        grad += -(lost_x.T @ ratio) / sigma
    return grad


def fit_censored_regression(
    won: Sequence[tuple[np.ndarray, float]],
    lost: Sequence[tuple[np.ndarray, float]],
    sigma: float,
    max_iters: int = 500,
    tol: float = 1e-8,
) -> CensoredFit:
    """Fit market-price coefficients from won (x, z) and lost (x, bid) pairs
    by full-batch gradient descent with backtracking line search.

    sigma is a fixed noise scale, not estimated. The objective is
    non-increasing by construction; a NaN objective raises with the
    iteration count.
    """
    if sigma <= 0:
        raise LandscapeError("sigma must be positive")
    if not won and not lost:
        raise LandscapeError("no data")
    dims = {len(x) for x, _ in list(won) + list(lost)}
    if len(dims) != 1:
        raise LandscapeError("inconsistent feature dimensions")
    dim = dims.pop()

    won_x = np.array([x for x, _ in won], dtype=float).reshape(len(won), dim)
    won_z = np.array([z for _, z in won], dtype=float)
    lost_x = np.array([x for x, _ in lost], dtype=float).reshape(len(lost), dim)
    lost_b = np.array([b for _, b in lost], dtype=float)

    beta = np.zeros(dim)
    nll = censored_nll(beta, won_x, won_z, lost_x, lost_b, sigma)
    history = [nll]
    step = 1.0 / max(len(won) + len(lost), 1)
    for it in range(max_iters):
        if math.isnan(nll):
            raise LandscapeError(f"objective diverged to NaN at iteration {it}")
        grad = _censored_grad(beta, won_x, won_z, lost_x, lost_b, sigma)
        gnorm2 = float(grad @ grad)
        if gnorm2 < tol:
            break
        t = step * 4.0  # allow the step to grow back after cautious iterations
        while True:
            candidate = beta - t * grad
            cand_nll = censored_nll(candidate, won_x, won_z, lost_x, lost_b, sigma)
            if cand_nll <= nll - 1e-4 * t * gnorm2:
                break
            t *= 0.5
            if t < 1e-18:
                candidate, cand_nll = beta, nll
                break
        if cand_nll >= nll - tol and t < 1e-17:
            break
        beta, nll, step = candidate, cand_nll, t
        history.append(nll)
    return CensoredFit(beta=beta, sigma=sigma, nll_history=history)


class WinFunction:
    """Win probability w(b): monotone non-decreasing, bounded in [0, 1].

    kinds: counting, kaplan_meier, parametric_l, lognormal_mixture,
    censored_linear. Serializes to JSON with a kind tag.
    """

    def __init__(self, kind: str, **params):
        self.kind = kind
        self.params = params
        if kind == "counting":
            zs = sorted(params["observed_prices"])
            if not zs:
                raise LandscapeError("no data")
            self._zs = np.asarray(zs, dtype=float)
        elif kind == "kaplan_meier":
            table = params["table"]
            if not isinstance(table, SurvivalTable):
                table = SurvivalTable(rows=tuple(tuple(r) for r in table))
                self.params["table"] = table
        elif kind == "parametric_l":
            if params["l"] <= 0:
                raise LandscapeError("scale parameter l must be positive")
        elif kind == "lognormal_mixture":
            total = sum(s.weight for s in params["samples"])
            if abs(total - 1.0) > 1e-9:
                raise LandscapeError("mixture weights must sum to 1")
        elif kind == "censored_linear":
            if params["sigma"] <= 0:
                raise LandscapeError("sigma must be positive")
            locs = np.atleast_1d(np.asarray(params["locations"], dtype=float))
            if locs.size == 0:
                raise LandscapeError("need at least one reference location")
            self._locs = locs
        else:
            raise LandscapeError(f"unknown win function kind {kind!r}")

    # -- constructors ------------------------------------------------------

    @classmethod
    def counting(cls, logs: Sequence[BidLogRecord]) -> "WinFunction":
        prices = [int(r.market_price) for r in logs if r.won]
        return cls("counting", observed_prices=prices)

    @classmethod
    def kaplan_meier(cls, table_or_logs) -> "WinFunction":
        if isinstance(table_or_logs, SurvivalTable):
            table = table_or_logs
        else:
            table = build_survival_table(table_or_logs)
        return cls("kaplan_meier", table=table)

    @classmethod
    def parametric(cls, l: float) -> "WinFunction":
        return cls("parametric_l", l=float(l))

    @classmethod
    def lognormal_mixture(cls, samples: Sequence[LognormalSample]) -> "WinFunction":
        return cls("lognormal_mixture", samples=tuple(samples))

    @classmethod
    def censored_linear(cls, beta, sigma: float, reference_x) -> "WinFunction":
        x = np.atleast_2d(np.asarray(reference_x, dtype=float))
        locations = x @ np.asarray(beta, dtype=float)
        return cls(
            "censored_linear",
            beta=tuple(float(b) for b in np.asarray(beta).ravel()),
            sigma=float(sigma),
            locations=tuple(float(v) for v in locations),
        )

    # -- evaluation --------------------------------------------------------

    def __call__(self, bid: float) -> float:
        b = float(bid)
        if b <= 0:
            return 0.0
        if self.kind == "counting":
            return float(np.count_nonzero(self._zs < b)) / len(self._zs)
        if self.kind == "kaplan_meier":
            return win_prob_km(self.params["table"], b)
        if self.kind == "parametric_l":
            return win_prob_parametric(self.params["l"], b)
        if self.kind == "lognormal_mixture":
            return float(
                sum(
                    s.weight * special.ndtr((math.log(b) - s.mu) / s.sigma)
                    for s in self.params["samples"]
                )
            )
        locs = self._locs
        return float(np.mean(special.ndtr((b - locs) / self.params["sigma"])))

    def masses(self) -> Optional[list[tuple[float, float]]]:
        """Discrete market-price masses [(z, P(Z=z)), ...] for step kinds,
        None for continuous kinds."""
        if self.kind == "counting":
            zs, counts = np.unique(self._zs, return_counts=True)
            n = counts.sum()
            return [(float(z), float(c) / n) for z, c in zip(zs, counts)]
        if self.kind == "kaplan_meier":
            out = []
            prev = 0.0
            for b, _, _ in self.params["table"].rows:
                w = self(b)
                if w > prev:
                    out.append((float(b - 1), w - prev))  # level b resolves price b-1
                    prev = w
            return out
        return None

    def integral(self, bid: float) -> float:
        """integral over [0, bid] of P(Z < t) dt; exact for step kinds."""
        b = float(bid)
        if b <= 0:
            return 0.0
        masses = self.masses()
        if masses is not None:
            return float(sum(p * (b - z) for z, p in masses if z < b))
        if self.kind == "parametric_l":
            l = self.params["l"]
            return b - l * math.log1p(b / l)
        value, _ = integrate.quad(self, 0.0, b, limit=200)
        return value

    # -- serialization -----------------------------------------------------

    def to_json(self) -> str:
        payload: dict = {"kind": self.kind}
        if self.kind == "counting":
            payload["observed_prices"] = list(self.params["observed_prices"])
        elif self.kind == "kaplan_meier":
            payload["survival_rows"] = [list(r) for r in self.params["table"].rows]
        elif self.kind == "parametric_l":
            payload["l"] = self.params["l"]
        elif self.kind == "lognormal_mixture":
            payload["samples"] = [
                {"mu": s.mu, "sigma": s.sigma, "weight": s.weight}
                for s in self.params["samples"]
            ]
        else:
            payload["beta"] = list(self.params["beta"])
            payload["sigma"] = self.params["sigma"]
            payload["locations"] = list(self.params["locations"])
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "WinFunction":
        payload = json.loads(text)
        kind = payload["kind"]
        if kind == "counting":
            return cls("counting", observed_prices=list(payload["observed_prices"]))
        if kind == "kaplan_meier":
            table = SurvivalTable(rows=tuple(tuple(r) for r in payload["survival_rows"]))
            return cls("kaplan_meier", table=table)
        if kind == "parametric_l":
            return cls("parametric_l", l=payload["l"])
        if kind == "lognormal_mixture":
            samples = tuple(
                LognormalSample(mu=s["mu"], sigma=s["sigma"], weight=s["weight"])
                for s in payload["samples"]
            )
            return cls("lognormal_mixture", samples=samples)
        if kind == "censored_linear":
            return cls(
                "censored_linear",
                beta=tuple(payload["beta"]),
                sigma=payload["sigma"],
                locations=tuple(payload["locations"]),
            )
        raise LandscapeError(f"unknown win function kind {kind!r}")


def expected_cost_second_price(win: WinFunction, bid: float) -> float:
    """Expected market price conditional on winning at ``bid``:

        c(b) = int_0^b z dw(z) / w(b) = b - int_0^b w(z) dz / w(b)

    which only needs evaluations of w. Requires w(bid) > 0.
    """
    w_b = win(bid)
    if w_b <= 0.0:
        raise LandscapeError("no win mass below bid")
    return float(bid) - win.integral(bid) / w_b


@dataclass(frozen=True)
class UniformWin:
    """Analytic win curve for market prices uniform on [0, high]; handy for
    synthetic markets and closed-form cross-checks. Accepts scalars or
    arrays."""

    high: float

    def __call__(self, bid):
        b = np.clip(np.asarray(bid, dtype=float), 0.0, self.high)
        out = b / self.high
        return float(out) if out.ndim == 0 else out

    def integral(self, bid):
        """integral of the cdf over [0, bid]."""
        raw = np.asarray(bid, dtype=float)
        b = np.clip(raw, 0.0, self.high)
        area = b * b / (2.0 * self.high) + np.maximum(raw - self.high, 0.0)
        return float(area) if area.ndim == 0 else area
