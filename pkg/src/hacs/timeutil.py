"""Instants as fractional days since the Unix epoch, plus observation windows."""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Optional

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
CDX_FORMAT = "%Y%m%d%H%M%S"


def to_days(when: datetime) -> float:
    if when.tzinfo is None:
        when = when.replace(tzinfo=timezone.utc)
    return (when - EPOCH).total_seconds() / 86400.0


def from_days(days: float) -> datetime:
    return EPOCH + timedelta(days=days)


def parse_cdx_timestamp(stamp: str) -> Optional[datetime]:
    """Parse a 14-digit archive timestamp; None if it is not a valid instant."""
    if len(stamp) != 14 or not stamp.isdigit():
        return None
    try:
        return datetime(int(stamp[0:4]), int(stamp[4:6]), int(stamp[6:8]), int(stamp[8:10]),
                        int(stamp[10:12]), int(stamp[12:14]), tzinfo=timezone.utc)
    except ValueError:
        return None


def format_cdx_timestamp(when: datetime) -> str:
    return when.astimezone(timezone.utc).strftime(CDX_FORMAT)


def parse_date(text: str) -> datetime:
    """ISO date or datetime, interpreted as UTC when naive."""
    when = datetime.fromisoformat(text)
    if when.tzinfo is None:
        when = when.replace(tzinfo=timezone.utc)
    return when


@dataclass(frozen=True)
class Window:
    """Closed time range ``[start, end]``."""

    start: datetime
    end: datetime

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError(f"window end {self.end} precedes start {self.start}")

    def __contains__(self, when: datetime) -> bool:
        return self.start <= when <= self.end

    @property
    def start_days(self) -> float:
        return to_days(self.start)

    @property
    def end_days(self) -> float:
        return to_days(self.end)

    @classmethod
    def parse(cls, start: str, end: str) -> "Window":
        return cls(parse_date(start), parse_date(end))


EVALUATION_WINDOW = Window(
    datetime(2015, 6, 1, tzinfo=timezone.utc), datetime(2018, 6, 1, tzinfo=timezone.utc)
)
