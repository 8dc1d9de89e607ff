import pytest

from rtbsim.core import BidLogRecord, Price


@pytest.fixture
def eight_record_log():
    """The 8-instance bid log whose survival transform is known exactly:
    rows (b, d, n) = (1,0,8), (2,2,7), (3,1,4), (4,1,2)."""
    return [
        BidLogRecord(bid=Price(2), won=True, market_price=Price(1)),
        BidLogRecord(bid=Price(3), won=True, market_price=Price(2)),
        BidLogRecord(bid=Price(2), won=False),
        BidLogRecord(bid=Price(3), won=True, market_price=Price(1)),
        BidLogRecord(bid=Price(3), won=False),
        BidLogRecord(bid=Price(4), won=False),
        BidLogRecord(bid=Price(4), won=True, market_price=Price(3)),
        BidLogRecord(bid=Price(1), won=False),
    ]
