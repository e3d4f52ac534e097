"""Verifier-side collection of checked token values and group risk estimates.

Tallies are plain values: collecting shards independently and merging once
is the concurrency contract.  Durable state is an append-only event log,
one verified presentation per line, from which tallies (and the rate-limit
ledger) are recomputed on load.
"""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Iterable, Sequence

from .dp import FrequencyEstimate, Policy, debias, expected_risk
from .token import Tid, TokenPayload

__all__ = [
    "PolicyMismatchError",
    "ResponseTally",
    "LogEvent",
    "empty_tally",
    "record",
    "merge",
    "aggregate",
    "append_event",
    "format_event",
    "parse_event",
    "read_events",
    "tally_from_events",
]


class PolicyMismatchError(ValueError):
    """Tokens from a different policy cannot enter this tally."""


@dataclass(frozen=True)
class ResponseTally:
    """Counts of verified token values for one policy, plus the observation window."""

    policy_id: bytes
    counts: tuple[int, ...]
    window: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if any(c < 0 for c in self.counts):
            raise ValueError("counts must be non-negative")
        if self.window is not None and self.window[0] > self.window[1]:
            raise ValueError("window start must not exceed end")

    @property
    def n(self) -> int:
        return sum(self.counts)


def empty_tally(policy: Policy) -> ResponseTally:
    return ResponseTally(policy_id=policy.policy_id, counts=(0,) * policy.k)


def record(tally: ResponseTally, payload: TokenPayload) -> ResponseTally:
    """Count one verified token value; returns the updated tally."""
    if payload.policy_id != tally.policy_id:
        raise PolicyMismatchError("token payload belongs to a different policy")
    if payload.token_value >= len(tally.counts):
        raise ValueError(
            f"token value {payload.token_value} outside tally with k={len(tally.counts)}"
        )
    counts = list(tally.counts)
    counts[payload.token_value] += 1
    return ResponseTally(tally.policy_id, tuple(counts), tally.window)


def _hull(a: tuple[float, float] | None, b: tuple[float, float] | None):
    if a is None:
        return b
    if b is None:
        return a
    return (min(a[0], b[0]), max(a[1], b[1]))


def merge(a: ResponseTally, b: ResponseTally) -> ResponseTally:
    """Elementwise sum of two shards; the window is the hull of both."""
    if a.policy_id != b.policy_id:
        raise PolicyMismatchError("cannot merge tallies from different policies")
    if len(a.counts) != len(b.counts):
        raise PolicyMismatchError("tallies disagree on k")
    counts = tuple(x + y for x, y in zip(a.counts, b.counts))
    return ResponseTally(a.policy_id, counts, _hull(a.window, b.window))


def aggregate(
    tally: ResponseTally, policy: Policy
) -> tuple[FrequencyEstimate, float, float]:
    """Debias a tally into (frequency estimate, expected risk, total risk sum)."""
    if tally.policy_id != policy.policy_id:
        raise PolicyMismatchError("tally belongs to a different policy")
    est = debias(tally.counts, policy)
    e_x = expected_risk(est)
    return est, e_x, est.n * e_x


# --- event log ---------------------------------------------------------
#
# One UTF-8 line per verified presentation:
#   ISO8601-timestamp,token_value,hex(sha256(TID))[:16]


@dataclass(frozen=True)
class LogEvent:
    timestamp: float
    token_value: int
    tid_hash: str

    def time_utc(self) -> datetime:
        return datetime.fromtimestamp(self.timestamp, tz=timezone.utc)


def format_event(timestamp: float, token_value: int, tid: Tid) -> str:
    iso = datetime.fromtimestamp(timestamp, tz=timezone.utc).isoformat()
    return f"{iso},{token_value},{tid.hash_hex()}"


def parse_event(line: str) -> LogEvent:
    iso, value, tid_hash = line.strip().split(",")
    ts = datetime.fromisoformat(iso)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return LogEvent(ts.timestamp(), int(value), tid_hash)


def append_event(path, timestamp: float, token_value: int, tid: Tid) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(format_event(timestamp, token_value, tid) + "\n")


def read_events(path) -> list[LogEvent]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                events.append(parse_event(line))
    return events


def tally_from_events(
    events: Iterable[LogEvent],
    policy: Policy,
    since: float | None = None,
    until: float | None = None,
) -> ResponseTally:
    """Recompute a tally from logged events, optionally time-filtered.

    Cumulative-exposure reporting over a day or week is exactly this with
    the matching window; there is no separate mechanism.
    """
    counts = [0] * policy.k
    window = None
    for ev in events:
        if since is not None and ev.timestamp < since:
            continue
        if until is not None and ev.timestamp > until:
            continue
        if not 0 <= ev.token_value < policy.k:
            raise ValueError(f"logged token value {ev.token_value} outside k={policy.k}")
        counts[ev.token_value] += 1
        window = _hull(window, (ev.timestamp, ev.timestamp))
    return ResponseTally(policy.policy_id, tuple(counts), window)
