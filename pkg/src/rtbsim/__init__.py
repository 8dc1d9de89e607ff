"""rtbsim: a real-time-bidding market simulator and bidding toolkit.

Subpackages cover the full demand- and supply-side quantitative stack:
auction mechanics (exchange), bid landscape forecasting (landscape), user
response prediction (response), bid optimisation (bidding), budget pacing
(pacing), reserve pricing (pricing), conversion attribution (attribution),
supply-quality checks (fraud), log formats (dataio) and the batch CLI.
"""

from .core import (
    BidLogRecord,
    BidRequest,
    Campaign,
    FeatureVector,
    MetricsReport,
    Price,
    compute_metrics,
    seeded_rng,
)

__all__ = [
    "BidLogRecord",
    "BidRequest",
    "Campaign",
    "FeatureVector",
    "MetricsReport",
    "Price",
    "compute_metrics",
    "seeded_rng",
]

__version__ = "0.1.0"
