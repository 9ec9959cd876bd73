"""Metering, billing, and usage reporting.

The metering unit is busy node-seconds per execution slot, accrued once per
successful unit attempt with the worker-measured runtime. Money is fixed
point with 6 fractional digits, rounded half-even; the price rate itself is
kept exact (a rate like 1/600 per node-second survives undistorted, so a
20-node, 3-hour run at 1.00 per node-hour bills exactly 60.00).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_EVEN, localcontext
from fractions import Fraction
from typing import Iterable, Optional

from ..errors import NegativeUsage

MONEY_QUANTUM = Decimal("0.000001")


def parse_rate(value) -> Decimal:
    """Accept Decimal, int, numeric strings, and fraction strings ("1/600")."""
    if isinstance(value, Decimal):
        rate = value
    elif isinstance(value, int):
        rate = Decimal(value)
    elif isinstance(value, str) and "/" in value:
        num, _, den = value.partition("/")
        frac = Fraction(int(num.strip()), int(den.strip()))
        with localcontext() as ctx:
            ctx.prec = 34
            rate = Decimal(frac.numerator) / Decimal(frac.denominator)
    else:
        rate = Decimal(str(value))
    if rate < 0:
        raise ValueError(f"rate must be nonnegative, got {value}")
    return rate


@dataclass(frozen=True)
class PriceSheet:
    rate_per_node_second: Decimal
    currency_label: str = "credits"

    @classmethod
    def make(cls, rate, currency_label: str = "credits") -> "PriceSheet":
        return cls(rate_per_node_second=parse_rate(rate), currency_label=currency_label)

    def to_doc(self) -> dict:
        return {"rate_per_node_second": str(self.rate_per_node_second),
                "currency_label": self.currency_label}


@dataclass
class AccountingRecord:
    user: str
    app_id: str
    node_id: str
    busy_node_seconds: float = 0.0
    completed_units: int = 0

    def to_doc(self) -> dict:
        return {"user": self.user, "app_id": self.app_id, "node_id": self.node_id,
                "busy_node_seconds": self.busy_node_seconds,
                "completed_units": self.completed_units}


class AccountingLedger:
    """One record per (user, app_id, node_id); busy seconds only increase."""

    def __init__(self):
        self._records: dict[tuple[str, str, str], AccountingRecord] = {}

    def accrue(self, user: str, app_id: str, node_id: str, seconds: float,
               completed: bool = False) -> AccountingRecord:
        if seconds < 0:
            raise NegativeUsage(f"cannot accrue {seconds} seconds")
        key = (user, app_id, node_id)
        record = self._records.get(key)
        if record is None:
            record = AccountingRecord(user=user, app_id=app_id, node_id=node_id)
            self._records[key] = record
        record.busy_node_seconds += seconds
        if completed:
            record.completed_units += 1
        return record

    def records(self, user: Optional[str] = None) -> list[AccountingRecord]:
        out = [r for r in self._records.values() if user is None or r.user == user]
        out.sort(key=lambda r: (r.user, r.app_id, r.node_id))
        return out

    def total_busy_seconds(self, user: Optional[str] = None) -> float:
        return sum(r.busy_node_seconds for r in self.records(user))


@dataclass
class BillStatement:
    user: str
    currency_label: str
    lines: list  # of {"app_id", "busy_node_seconds", "completed_units", "amount"}
    total: Decimal

    def to_doc(self) -> dict:
        return {
            "user": self.user,
            "currency_label": self.currency_label,
            "lines": [dict(line, amount=str(line["amount"])) for line in self.lines],
            "total": str(self.total),
        }


def _money(value: Decimal) -> Decimal:
    return value.quantize(MONEY_QUANTUM, rounding=ROUND_HALF_EVEN)


def compute_bill(records: Iterable[AccountingRecord], prices: PriceSheet,
                 user: str = "") -> BillStatement:
    """One line per application: busy node-seconds x rate, rounded half-even
    to 6 fractional digits; the total is the sum of the rounded lines."""
    per_app: dict[str, dict] = {}
    users = set()
    for record in records:
        users.add(record.user)
        entry = per_app.setdefault(record.app_id, {"busy_node_seconds": 0.0, "completed_units": 0})
        entry["busy_node_seconds"] += record.busy_node_seconds
        entry["completed_units"] += record.completed_units

    lines = []
    total = Decimal(0)
    with localcontext() as ctx:
        ctx.prec = 34
        for app_id in sorted(per_app):
            entry = per_app[app_id]
            amount = _money(Decimal(repr(entry["busy_node_seconds"])) * prices.rate_per_node_second)
            lines.append({"app_id": app_id,
                          "busy_node_seconds": entry["busy_node_seconds"],
                          "completed_units": entry["completed_units"],
                          "amount": amount})
            total += amount
    if not user:
        user = users.pop() if len(users) == 1 else ""
    return BillStatement(user=user, currency_label=prices.currency_label,
                         lines=lines, total=_money(total))


@dataclass
class PoolUsageRecord:
    node_id: str
    pool_id: str
    acquired_at: float
    released_at: Optional[float] = None

    def node_seconds(self, now: float) -> float:
        end = self.released_at if self.released_at is not None else now
        return max(0.0, end - self.acquired_at)

    def to_doc(self) -> dict:
        return {"node_id": self.node_id, "pool_id": self.pool_id,
                "acquired_at": self.acquired_at, "released_at": self.released_at}


class PoolUsageLedger:
    """Node-seconds per provisioned node; accrual starts at acquisition."""

    def __init__(self):
        self._records: list[PoolUsageRecord] = []

    def open(self, node_id: str, pool_id: str, acquired_at: float) -> PoolUsageRecord:
        record = PoolUsageRecord(node_id=node_id, pool_id=pool_id, acquired_at=acquired_at)
        self._records.append(record)
        return record

    def close(self, node_id: str, released_at: float) -> None:
        for record in self._records:
            if record.node_id == node_id and record.released_at is None:
                record.released_at = released_at

    def records(self, pool_id: Optional[str] = None) -> list[PoolUsageRecord]:
        return [r for r in self._records if pool_id is None or r.pool_id == pool_id]

    def total_node_seconds(self, pool_id: str, now: float) -> float:
        return sum(r.node_seconds(now) for r in self.records(pool_id))


def build_usage_report(records: Iterable[AccountingRecord], usage_summary,
                       interval: tuple[float, float]) -> dict:
    """Per-user and per-application totals plus node utilization; report
    totals equal the op-level sums exactly."""
    per_user: dict[str, dict] = {}
    per_app: dict[str, dict] = {}
    total_seconds = 0.0
    total_units = 0
    for record in records:
        u = per_user.setdefault(record.user, {"busy_node_seconds": 0.0, "completed_units": 0})
        u["busy_node_seconds"] += record.busy_node_seconds
        u["completed_units"] += record.completed_units
        a = per_app.setdefault(record.app_id, {"user": record.user,
                                               "busy_node_seconds": 0.0,
                                               "completed_units": 0})
        a["busy_node_seconds"] += record.busy_node_seconds
        a["completed_units"] += record.completed_units
        total_seconds += record.busy_node_seconds
        total_units += record.completed_units
    return {
        "interval": {"start": interval[0], "end": interval[1]},
        "per_user": {u: per_user[u] for u in sorted(per_user)},
        "per_app": {a: per_app[a] for a in sorted(per_app)},
        "node_utilization": usage_summary.to_doc() if usage_summary is not None else None,
        "totals": {"busy_node_seconds": total_seconds, "completed_units": total_units},
    }
