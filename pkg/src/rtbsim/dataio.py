"""Canonical bid-log schema, parsers, feature encoding and dataset splits.

The canonical format is versioned, tab-separated text with nine columns:

    timestamp_ms  auction_id  campaign_id  bid  won  market_price  click
    conversion  features

``market_price``, ``click`` and ``conversion`` are empty unless the auction
was won. ``features`` holds space-separated ``field:value`` tokens. TSV was
chosen over a binary format for diffability and test fixtures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .core import FeatureVector, Price

LOG_HEADER = "#canonical-bid-log v1"
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

IPINYOU_COLUMNS = 24  # season 2/3 layout; an optional 25th column is the click label


class ParseError(ValueError):
    def __init__(self, message: str, column: Optional[int] = None, line_number: Optional[int] = None):
        self.column = column
        self.line_number = line_number
        where = ""
        if line_number is not None:
            where += f" line {line_number}"
        if column is not None:
            where += f" column {column}"
        super().__init__(f"{message}{' (' + where.strip() + ')' if where else ''}")


def fnv1a64(text: str) -> int:
    """FNV-1a 64-bit hash; dependency-free and stable across platforms."""
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class CanonicalLogLine:
    timestamp: int
    auction_id: str
    campaign_id: str
    bid: Price
    won: bool
    market_price: Optional[Price] = None
    click: Optional[int] = None
    conversion: Optional[int] = None
    features: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.won and (
            self.market_price is not None or self.click is not None or self.conversion is not None
        ):
            raise ParseError("losing lines carry no market price, click or conversion")
        if not self.features or any(not t for t in self.features):
            raise ParseError("features tokens must be non-empty")


def serialize_line(record: CanonicalLogLine) -> str:
    def opt(v) -> str:
        return "" if v is None else str(int(v))

    return "\t".join(
        [
            str(record.timestamp),
            record.auction_id,
            record.campaign_id,
            str(int(record.bid)),
            "1" if record.won else "0",
            opt(record.market_price),
            opt(record.click),
            opt(record.conversion),
            " ".join(record.features),
        ]
    )


def parse_line(text: str, line_number: Optional[int] = None) -> CanonicalLogLine:
    """Parse one canonical data line into a typed record.

    Raises ParseError carrying the 1-based column index of the offending
    field; streaming callers catch per-line errors and continue.
    """
    cols = text.rstrip("\n").split("\t")
    if len(cols) < 9:
        raise ParseError(f"expected 9 columns, got {len(cols)}", column=len(cols), line_number=line_number)

    def intcol(i: int, name: str) -> int:
        try:
            return int(cols[i])
        except ValueError:
            raise ParseError(f"malformed integer in {name}", column=i + 1, line_number=line_number)

    timestamp = intcol(0, "timestamp")
    auction_id, campaign_id = cols[1], cols[2]
    try:
        bid = Price(intcol(3, "bid"))
    except ValueError as e:
        raise ParseError(str(e), column=4, line_number=line_number)
    won_raw = intcol(4, "won")
    if won_raw not in (0, 1):
        raise ParseError("won flag must be 0 or 1", column=5, line_number=line_number)
    won = bool(won_raw)

    def optcol(i: int, name: str) -> Optional[int]:
        if cols[i] == "":
            return None
        return intcol(i, name)

    market_price = optcol(5, "market_price")
    click = optcol(6, "click")
    conversion = optcol(7, "conversion")
    if not won and market_price is not None:
        raise ParseError("losing line has a market price", column=6, line_number=line_number)
    if not won and click is not None:
        raise ParseError("losing line has a click label", column=7, line_number=line_number)
    if not won and conversion is not None:
        raise ParseError("losing line has a conversion label", column=8, line_number=line_number)
    if won and market_price is None:
        raise ParseError("winning line lacks a market price", column=6, line_number=line_number)
    features = tuple(t for t in cols[8].split(" ") if t)
    if not features:
        raise ParseError("features must be non-empty", column=9, line_number=line_number)
    try:
        mp = None if market_price is None else Price(market_price)
        return CanonicalLogLine(
            timestamp=timestamp,
            auction_id=auction_id,
            campaign_id=campaign_id,
            bid=bid,
            won=won,
            market_price=mp,
            click=click,
            conversion=conversion,
            features=features,
        )
    except ParseError:
        raise
    except ValueError as e:
        raise ParseError(str(e), line_number=line_number)


def parse_lines(lines: Iterable[str]) -> tuple[list[CanonicalLogLine], list[ParseError]]:
    """Parse a stream; malformed lines become located errors, not aborts.
    The header line, if present, is skipped."""
    records: list[CanonicalLogLine] = []
    errors: list[ParseError] = []
    for i, line in enumerate(lines, start=1):
        if i == 1 and line.rstrip("\n") == LOG_HEADER:
            continue
        if not line.strip():
            continue
        try:
            records.append(parse_line(line, line_number=i))
        except ParseError as e:
            errors.append(e)
    return records, errors


def read_log(path) -> tuple[list[CanonicalLogLine], list[ParseError]]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_lines(fh)


def write_log(path, records: Iterable[CanonicalLogLine]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LOG_HEADER + "\n")
        for r in records:
            fh.write(serialize_line(r) + "\n")


# ---------------------------------------------------------------------------
# Feature encoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderConfig:
    """mode "hashed" buckets tokens by FNV-1a into 2^bits dimensions;
    "exact_onehot" uses a dictionary with one out-of-vocabulary bucket per
    field and must be fitted before use."""

    mode: str = "hashed"
    bits: int = 22

    def __post_init__(self):
        if self.mode not in ("hashed", "exact_onehot"):
            raise ParseError(f"unknown encoder mode {self.mode!r}")
        if self.mode == "hashed" and not 16 <= self.bits <= 28:
            raise ParseError("hashed bits must lie in [16, 28]")


class Encoder:
    """Immutable once fitted; encoding is a pure function of (tokens, config)."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        self._field_offsets: dict[str, int] = {}
        self._value_index: dict[str, dict[str, int]] = {}
        self._dimension = 1 << config.bits if config.mode == "hashed" else 0
        self._fitted = config.mode == "hashed"

    @property
    def dimension(self) -> int:
        return self._dimension

    def fit(self, token_lists: Iterable[Sequence[str]]) -> "Encoder":
        """Build the field/value dictionary in one pass (exact mode only).
        Layout is deterministic: fields and values sorted, one trailing
        out-of-vocabulary bucket per field."""
        if self.config.mode != "exact_onehot":
            return self
        values: dict[str, set[str]] = {}
        for tokens in token_lists:
            for token in tokens:
                f, v = _split_token(token)
                values.setdefault(f, set()).add(v)
        offset = 0
        for f in sorted(values):
            vs = sorted(values[f])
            self._field_offsets[f] = offset
            self._value_index[f] = {v: offset + i for i, v in enumerate(vs)}
            offset += len(vs) + 1  # trailing OOV bucket
        self._dimension = offset
        self._fitted = True
        return self

    def encode(self, tokens: Sequence[str]) -> FeatureVector:
        """One active index per token; unknown values fall into the field's
        OOV bucket and unknown fields are dropped (exact mode)."""
        if not self._fitted:
            raise ParseError("encoder must be fitted before encoding")
        indices: set[int] = set()
        if self.config.mode == "hashed":
            mask = self._dimension - 1
            for token in tokens:
                indices.add(fnv1a64(token) & mask)
        else:
            for token in tokens:
                f, v = _split_token(token)
                vi = self._value_index.get(f)
                if vi is None:
                    continue
                oov = self._field_offsets[f] + len(vi)
                indices.add(vi.get(v, oov))
        return FeatureVector(indices=tuple(sorted(indices)), dimension=self._dimension)


def _split_token(token: str) -> tuple[str, str]:
    if ":" not in token:
        raise ParseError(f"token {token!r} is not field:value")
    f, v = token.split(":", 1)
    return f, v


def encode(tokens: Sequence[str], config: EncoderConfig, encoder: Optional[Encoder] = None) -> FeatureVector:
    """Encode tokens under ``config``; exact mode requires a fitted encoder."""
    if config.mode == "hashed":
        return Encoder(config).encode(tokens)
    if encoder is None:
        raise ParseError("exact_onehot encoding needs a fitted encoder")
    return encoder.encode(tokens)


# ---------------------------------------------------------------------------
# Dataset splitting
# ---------------------------------------------------------------------------


def split(
    records: Sequence[CanonicalLogLine],
    scheme: str = "by_time",
    fraction: float = 0.5,
) -> tuple[list[CanonicalLogLine], list[CanonicalLogLine]]:
    """Deterministic, disjoint, exhaustive train/test split.

    "by_time" puts the earliest ``fraction`` of records (by timestamp,
    stable) into train; "by_hash" routes each record by the FNV hash of its
    auction id, which is stable under reordering.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ParseError("fraction must lie in [0, 1]")
    if scheme == "by_time":
        order = sorted(range(len(records)), key=lambda i: (records[i].timestamp, i))
        cut = int(math.floor(fraction * len(records)))
        train_idx = set(order[:cut])
        train = [r for i, r in enumerate(records) if i in train_idx]
        test = [r for i, r in enumerate(records) if i not in train_idx]
        return train, test
    if scheme == "by_hash":
        threshold = fraction * 2**64
        train, test = [], []
        for r in records:
            (train if fnv1a64(r.auction_id) < threshold else test).append(r)
        return train, test
    raise ParseError(f"unknown split scheme {scheme!r}")


# ---------------------------------------------------------------------------
# Touchpoint-path logs (attribution input)
# ---------------------------------------------------------------------------

PATH_HEADER = "#touchpoint-paths v1"


def parse_path_line(text: str, line_number: Optional[int] = None):
    """One user journey per line: user_id, comma-separated channel@timestamp
    events, conversion flag, conversion value in ticks."""
    from .attribution import TouchpointPath

    cols = text.rstrip("\n").split("\t")
    if len(cols) != 4:
        raise ParseError(f"expected 4 columns, got {len(cols)}", column=len(cols), line_number=line_number)
    events = []
    for item in cols[1].split(","):
        item = item.strip()
        if not item:
            continue
        if "@" not in item:
            raise ParseError(f"event {item!r} is not channel@timestamp", column=2, line_number=line_number)
        channel, ts = item.rsplit("@", 1)
        try:
            events.append((channel, int(ts)))
        except ValueError:
            raise ParseError(f"malformed event timestamp in {item!r}", column=2, line_number=line_number)
    if cols[2] not in ("0", "1"):
        raise ParseError("conversion flag must be 0 or 1", column=3, line_number=line_number)
    try:
        value = Price(int(cols[3]))
    except ValueError as e:
        raise ParseError(str(e), column=4, line_number=line_number)
    return cols[0], TouchpointPath(events=tuple(events), converted=cols[2] == "1", value=value)


def read_paths(path) -> tuple[list, list[ParseError]]:
    """Read a touchpoint-path log; returns ((user_id, TouchpointPath) pairs,
    located per-line errors)."""
    out, errors = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if i == 1 and line.rstrip("\n") == PATH_HEADER:
                continue
            if not line.strip():
                continue
            try:
                out.append(parse_path_line(line, line_number=i))
            except ParseError as e:
                errors.append(e)
    return out, errors


def write_paths(path, rows) -> None:
    """rows: iterable of (user_id, TouchpointPath)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(PATH_HEADER + "\n")
        for user_id, tp in rows:
            events = ",".join(f"{c}@{t}" for c, t in tp.events)
            fh.write(f"{user_id}\t{events}\t{1 if tp.converted else 0}\t{int(tp.value)}\n")


# ---------------------------------------------------------------------------
# iPinYou adapter (season 2/3 layout)
# ---------------------------------------------------------------------------

_IPINYOU_FEATURE_COLUMNS = {
    4: "useragent",
    6: "region",
    7: "city",
    8: "adexchange",
    9: "domain",
    13: "slotwidth",
    14: "slotheight",
    15: "slotvisibility",
    16: "slotformat",
    18: "creative",
}


def parse_ipinyou_line(text: str, line_number: Optional[int] = None) -> CanonicalLogLine:
    """Map one season-2/3 iPinYou impression line (24 tab-separated fields,
    optionally a 25th click label) into the canonical schema.

    Impression logs are wins by construction: bid = biddingprice, market
    price = payingprice, both kept as integer ticks. A missing conversion
    column is tolerated (left empty). Other layouts are rejected.
    """
    cols = text.rstrip("\n").split("\t")
    if len(cols) not in (IPINYOU_COLUMNS, IPINYOU_COLUMNS + 1):
        raise ParseError(
            f"not a season-2/3 iPinYou impression line: expected {IPINYOU_COLUMNS} "
            f"or {IPINYOU_COLUMNS + 1} columns, got {len(cols)}",
            column=len(cols),
            line_number=line_number,
        )
    try:
        timestamp = int(cols[1])
        bid = Price(int(cols[19]))
        paying = Price(int(cols[20]))
    except ValueError as e:
        raise ParseError(f"malformed iPinYou numeric field: {e}", line_number=line_number)
    click = None
    if len(cols) == IPINYOU_COLUMNS + 1:
        click = 1 if cols[24].strip() == "1" else 0
    features = [f"{name}:{cols[i]}" for i, name in sorted(_IPINYOU_FEATURE_COLUMNS.items()) if cols[i]]
    for tag in cols[23].split(","):
        tag = tag.strip()
        if tag:
            features.append(f"usertag:{tag}")
    if not features:
        features = ["source:ipinyou"]
    return CanonicalLogLine(
        timestamp=timestamp,
        auction_id=cols[0],
        campaign_id=cols[22] or "unknown",
        bid=bid,
        won=True,
        market_price=paying,
        click=click,
        conversion=None,
        features=tuple(features),
    )
