"""Foundation services: storage, reservation, accounting/billing, reporting,
and the master's append-only journal."""

from .storage import BlobStore, FileRef
from .reservation import ReservationCalendar, ReservationSlot
from .accounting import (
    AccountingLedger,
    AccountingRecord,
    BillStatement,
    PoolUsageLedger,
    PriceSheet,
    build_usage_report,
    compute_bill,
)
from .journal import Journal

__all__ = [
    "BlobStore", "FileRef",
    "ReservationCalendar", "ReservationSlot",
    "AccountingLedger", "AccountingRecord", "BillStatement",
    "PoolUsageLedger", "PriceSheet", "build_usage_report", "compute_bill",
    "Journal",
]
