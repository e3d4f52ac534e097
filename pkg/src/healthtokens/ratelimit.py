"""Per-provider replay mitigation: cap uses of each TID per epoch.

Epochs are aligned to multiples of ``epoch_seconds`` from the Unix epoch,
not sliding windows; crossing a boundary resets the whole ledger.  TIDs
are stored as truncated hashes so the ledger never doubles as a token
database.  Callers present tokens one at a time per provider; concurrent
providers use independent ledgers.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

from .aggregate import LogEvent
from .token import Tid

__all__ = ["UsageLedger", "check_and_record", "epoch_of", "usage_counts"]


def epoch_of(now: float, epoch_seconds: int) -> int:
    return int(now // epoch_seconds)


@dataclass
class UsageLedger:
    epoch_seconds: int
    rate_limit: int
    epoch: int | None = None
    counts: dict[bytes, int] = field(default_factory=dict)


def check_and_record(ledger: UsageLedger, tid: Tid, now: float) -> bool:
    """Accept (and count) one presentation of a TID, or reject it as over-limit.

    Counts never exceed the rate limit: rejected presentations are not
    accumulated.
    """
    epoch = epoch_of(now, ledger.epoch_seconds)
    if epoch != ledger.epoch:
        ledger.epoch = epoch
        ledger.counts = {}
    key = tid.hash16()
    used = ledger.counts.get(key, 0)
    if used >= ledger.rate_limit:
        return False
    ledger.counts[key] = used + 1
    return True


def usage_counts(
    events: Iterable[LogEvent], epoch_seconds: int, epoch: int | None = None
) -> dict[int, Counter]:
    """Per-epoch, per-TID-hash use counts rebuilt from an event log.

    The event log is the ledger's persistent form (shared TID-hash column).
    Returns {epoch_index: Counter{tid_hash_hex: count}}, optionally
    restricted to one epoch.
    """
    out: dict[int, Counter] = {}
    for ev in events:
        e = epoch_of(ev.timestamp, epoch_seconds)
        if epoch is not None and e != epoch:
            continue
        out.setdefault(e, Counter())[ev.tid_hash] += 1
    return out
