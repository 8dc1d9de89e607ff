import numpy as np
import pytest

from rtbsim.core import (
    AuctionResult,
    Campaign,
    FeatureVector,
    Price,
    compute_metrics,
    price_from_cpm,
    price_from_currency,
    price_to_currency,
    seeded_rng,
)


class TestPrice:
    def test_non_negative(self):
        with pytest.raises(ValueError):
            Price(-1)

    def test_rejects_fractional(self):
        with pytest.raises(ValueError):
            Price(2.5)
        assert Price(2.0) == 2

    def test_cpm_conversion(self):
        # $10 CPM = $0.01 per impression = 10_000 micro-ticks
        assert price_from_cpm(10.0) == 10_000

    def test_currency_round_trip(self):
        rng = seeded_rng(0)
        for ticks in rng.integers(0, 10**12, size=200):
            p = Price(int(ticks))
            assert price_from_currency(price_to_currency(p)) == p

    def test_ordering_total(self):
        values = [Price(3), Price(1), Price(2), Price(1)]
        assert sorted(values) == [1, 1, 2, 3]


class TestFeatureVector:
    def test_strictly_increasing(self):
        with pytest.raises(ValueError):
            FeatureVector(indices=(3, 3), dimension=5)
        with pytest.raises(ValueError):
            FeatureVector(indices=(5, 2), dimension=8)

    def test_bounds(self):
        with pytest.raises(ValueError):
            FeatureVector(indices=(0, 9), dimension=9)
        fv = FeatureVector(indices=(0, 8), dimension=9)
        assert len(fv) == 2


class TestCampaign:
    def test_invariants(self):
        with pytest.raises(ValueError):
            Campaign(id="c", budget=Price(0), volume=10, click_value=Price(1))
        with pytest.raises(ValueError):
            Campaign(id="c", budget=Price(1), volume=0, click_value=Price(1))
        with pytest.raises(ValueError):
            Campaign(id="c", budget=Price(1), volume=1, click_value=Price(1), lifetime=(5, 5))


class TestMetrics:
    def test_basic_counts(self):
        # 4 auctions, 2 wins, 1 click, spend 10
        outcomes = [
            AuctionResult(won=True, clicked=True, cost=Price(6)),
            AuctionResult(won=True, clicked=False, cost=Price(4)),
            AuctionResult(won=False),
            AuctionResult(won=False),
        ]
        m = compute_metrics(outcomes)
        assert m.awr == 0.5
        assert m.ctr == 0.5
        assert m.ecpc == 10.0
        assert m.spend == 10

    def test_empty(self):
        m = compute_metrics([])
        assert m.impressions == 0 and m.clicks == 0
        assert m.ecpc is None and m.ecpm is None
        assert m.ctr == 0.0 and m.awr == 0.0

    def test_zero_clicks(self):
        outcomes = [AuctionResult(won=True, cost=Price(2)) for _ in range(1000)]
        m = compute_metrics(outcomes)
        assert m.ctr == 0.0
        assert m.ecpc is None
        assert m.impressions == 1000

    def test_ratios_recompute_exactly(self):
        rng = seeded_rng(3)
        outcomes = [
            AuctionResult(
                entered=True,
                won=bool(w),
                clicked=bool(w and c),
                cost=Price(int(cost) if w else 0),
            )
            for w, c, cost in zip(
                rng.integers(0, 2, 500), rng.integers(0, 2, 500), rng.integers(0, 50, 500)
            )
        ]
        m = compute_metrics(outcomes)
        assert m.ctr == (m.clicks / m.impressions if m.impressions else 0.0)
        assert m.awr == m.impressions / m.auctions_entered
        if m.clicks:
            assert m.ecpc == int(m.spend) / m.clicks


class TestRng:
    def test_same_seed_same_stream(self):
        a = seeded_rng(42).uniform(size=100)
        b = seeded_rng(42).uniform(size=100)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(seeded_rng(1).uniform(size=100), seeded_rng(2).uniform(size=100))

    def test_substreams_independent(self):
        assert not np.array_equal(
            seeded_rng(7, 0).uniform(size=10), seeded_rng(7, 1).uniform(size=10)
        )

    def test_gaussian_mean(self):
        draws = seeded_rng(9).normal(size=100_000)
        assert abs(float(draws.mean())) < 0.02
