"""Central-authority sketch for detecting TIDs over-used across providers.

Per report, the server hands out a fresh uniformly random l-bit challenge
r and the provider answers one bit: the GF[2] inner product of r with
v = H(TID) truncated to l bits.  The server keeps 2^l signed counters:
every x agreeing with the reported bit (<x, r> = b) moves up by one, every
other x moves down.  For the counter at a value of true frequency p the
expectation is p * N after N reports, so counters above tau * N expose
over-used tokens while single-use tokens stay at noise level ~sqrt(N).

Folding reports one at a time costs O(N * 2^l); the batched path
accumulates a[r] = sum over reports with challenge r of (-1)^b and applies
one integer Walsh-Hadamard transform, O(2^l * l) total, with bit-identical
results.

Caveats inherited from the protocol: challenges include the all-zero
string (a uniform +1 drift at rate 2^-l, negligible for l >= 8), and two
TIDs colliding on l hash bits are flagged together.
"""
from __future__ import annotations

import hashlib
import random
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .token import Tid

__all__ = [
    "Challenge",
    "Report",
    "SketchState",
    "HeavyHitterServer",
    "RejectedReportError",
    "EmptySketchError",
    "tid_index",
    "tid_indices",
    "inner_bit",
    "inner_bits",
    "client_report",
    "sketch_update",
    "sketch_update_arrays",
    "walsh_hadamard_transform",
    "publish_heavy",
    "check_published",
    "save_sketch",
    "load_sketch",
    "handle_line",
]

SNAPSHOT_MAGIC = b"HHS1"
_SNAPSHOT_HEADER = struct.Struct("<4sIQ")

# parity of the low 16 bits, for vectorized inner products at any l <= 24
_t = np.arange(1 << 16, dtype=np.uint32)
_t ^= _t >> 8
_t ^= _t >> 4
_t ^= _t >> 2
_t ^= _t >> 1
_PARITY16 = (_t & 1).astype(np.uint8)
del _t


class RejectedReportError(Exception):
    """The report's challenge is unknown, already used, or inconsistent."""


class EmptySketchError(Exception):
    """Publication requested before any report was ingested."""


@dataclass(frozen=True)
class Challenge:
    """A one-time challenge: server-chosen nonce plus uniform l-bit string r."""

    nonce: bytes
    r: int


@dataclass(frozen=True)
class Report:
    """Provider answer: the challenge it responds to and b = <v, r> over GF[2]."""

    challenge: Challenge
    b: int


def tid_index(tid: Tid | bytes, l: int) -> int:
    """First l bits of SHA-256(TID bytes), as an integer in [0, 2^l)."""
    raw = tid.bytes if isinstance(tid, Tid) else tid
    digest = hashlib.sha256(raw).digest()
    return int.from_bytes(digest, "big") >> (256 - l)


def tid_indices(tids: Iterable[Tid | bytes], l: int) -> np.ndarray:
    return np.fromiter((tid_index(t, l) for t in tids), dtype=np.int64)


def inner_bit(x: int, r: int) -> int:
    """GF[2] inner product of two l-bit values: parity of popcount(x AND r)."""
    return bin(x & r).count("1") & 1


def inner_bits(xs: np.ndarray, rs: np.ndarray) -> np.ndarray:
    """Vectorized GF[2] inner products for values below 2^24."""
    v = np.asarray(xs, dtype=np.int64) & np.asarray(rs, dtype=np.int64)
    return (_PARITY16[v & 0xFFFF] ^ _PARITY16[v >> 16]).astype(np.int64)


def client_report(tid: Tid | bytes, challenge: Challenge, l: int) -> Report:
    """Provider side: hash the TID to l bits and answer the challenge."""
    v = tid_index(tid, l)
    return Report(challenge=challenge, b=inner_bit(v, challenge.r))


class SketchState:
    """The counter table T of 2^l signed 64-bit counters plus the report count N."""

    def __init__(self, l: int, table: np.ndarray | None = None, n_reports: int = 0):
        if not 1 <= l <= 24:
            raise ValueError("sketch width l must be in [1, 24]")
        self.l = l
        if table is None:
            table = np.zeros(1 << l, dtype=np.int64)
        else:
            table = np.asarray(table, dtype=np.int64)
            if table.shape != (1 << l,):
                raise ValueError(f"table must have 2^{l} entries")
        self.table = table
        self.n_reports = int(n_reports)
        self._xs = np.arange(1 << l, dtype=np.int64)


def sketch_update(state: SketchState, r: int, b: int) -> None:
    """Fold one report naively: +-1 on every counter depending on <x, r> = b."""
    if b not in (0, 1):
        raise RejectedReportError(f"report bit must be 0 or 1, got {b}")
    if not 0 <= r < (1 << state.l):
        raise RejectedReportError("challenge r outside sketch width")
    agree = inner_bits(state._xs, np.int64(r)) == b
    state.table += np.where(agree, 1, -1)
    state.n_reports += 1


def walsh_hadamard_transform(values: Sequence[int] | np.ndarray) -> np.ndarray:
    """In-order integer Walsh-Hadamard transform: out[x] = sum_r (-1)^<x,r> in[r]."""
    a = np.array(values, dtype=np.int64)
    n = a.size
    if n == 0 or n & (n - 1):
        raise ValueError("length must be a positive power of two")
    h = 1
    while h < n:
        a = a.reshape(n // (2 * h), 2, h)
        left = a[:, 0, :].copy()
        a[:, 0, :] = left + a[:, 1, :]
        a[:, 1, :] = left - a[:, 1, :]
        a = a.reshape(n)
        h *= 2
    return a


def sketch_update_arrays(state: SketchState, rs: np.ndarray, bs: np.ndarray) -> None:
    """Fold many (r, b) reports at once via the transform.

    Produces exactly the same table as folding :func:`sketch_update` report
    by report: each report contributes (-1)^(<x,r> XOR b) to T[x], which is
    the Walsh-Hadamard transform of the per-challenge sums of (-1)^b.
    """
    rs = np.asarray(rs, dtype=np.int64)
    bs = np.asarray(bs, dtype=np.int64)
    if rs.shape != bs.shape:
        raise ValueError("challenge and bit arrays must align")
    if rs.size == 0:
        return
    if rs.min() < 0 or rs.max() >= (1 << state.l):
        raise RejectedReportError("challenge r outside sketch width")
    if not np.isin(bs, (0, 1)).all():
        raise RejectedReportError("report bits must be 0 or 1")
    size = 1 << state.l
    acc = np.bincount(rs[bs == 0], minlength=size) - np.bincount(
        rs[bs == 1], minlength=size
    )
    state.table += walsh_hadamard_transform(acc)
    state.n_reports += rs.size


def publish_heavy(state: SketchState, tau: float) -> set[int]:
    """All x with T[x] strictly above tau * N."""
    if state.n_reports == 0:
        raise EmptySketchError("no reports ingested yet")
    threshold = tau * state.n_reports
    return {int(x) for x in np.nonzero(state.table > threshold)[0]}


def check_published(tid: Tid | bytes, published: set[int], l: int) -> bool:
    """Provider check: is this TID's l-bit hash on the published list?

    A hit means the verifier should discard the token from aggregation or
    refuse it outright; hash collisions flag innocents along with the
    over-used value.
    """
    return tid_index(tid, l) in published


def save_sketch(state: SketchState, path) -> None:
    """Snapshot: magic 'HHS1', l (u32 LE), N (u64 LE), then 2^l s64 LE counters."""
    with open(path, "wb") as fh:
        fh.write(_SNAPSHOT_HEADER.pack(SNAPSHOT_MAGIC, state.l, state.n_reports))
        fh.write(state.table.astype("<i8").tobytes())


def load_sketch(path) -> SketchState:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _SNAPSHOT_HEADER.size:
        raise ValueError("sketch snapshot truncated")
    magic, l, n_reports = _SNAPSHOT_HEADER.unpack_from(blob)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError("bad sketch snapshot magic")
    body = blob[_SNAPSHOT_HEADER.size :]
    if len(body) != (1 << l) * 8:
        raise ValueError("sketch snapshot body has wrong length")
    table = np.frombuffer(body, dtype="<i8").astype(np.int64)
    return SketchState(l, table=table, n_reports=n_reports)


class HeavyHitterServer:
    """Owns the sketch, issues one-time challenges, and validates reports.

    Challenges are logged by nonce and consumed on first use, so a
    provider cannot replay a crafted (r, b) pair.  Updates are applied
    serially; batched ingestion validates every challenge before touching
    the table.
    """

    def __init__(self, l: int, tau: float, rng=None, state: SketchState | None = None):
        if not 0 < tau < 1:
            raise ValueError("tau must lie strictly between 0 and 1")
        self.state = state if state is not None else SketchState(l)
        if self.state.l != l:
            raise ValueError("state width does not match l")
        self.tau = tau
        self.rng = rng if rng is not None else random.SystemRandom()
        self._challenges: dict[bytes, int] = {}

    @property
    def l(self) -> int:
        return self.state.l

    def issue_challenge(self) -> Challenge:
        while True:
            nonce = self.rng.getrandbits(64).to_bytes(8, "big")
            if nonce not in self._challenges:
                break
        r = self.rng.getrandbits(self.l)
        self._challenges[nonce] = r
        return Challenge(nonce=nonce, r=r)

    def _consume(self, report: Report) -> tuple[int, int]:
        issued_r = self._challenges.pop(report.challenge.nonce, None)
        if issued_r is None:
            raise RejectedReportError("unknown or already-used challenge")
        if issued_r != report.challenge.r:
            raise RejectedReportError("challenge bits do not match issuance")
        if report.b not in (0, 1):
            raise RejectedReportError("report bit must be 0 or 1")
        return issued_r, report.b

    def submit(self, report: Report) -> None:
        r, b = self._consume(report)
        sketch_update(self.state, r, b)

    def submit_batch(self, reports: Iterable[Report]) -> None:
        pairs = [self._consume(rep) for rep in reports]
        if not pairs:
            return
        rs = np.array([p[0] for p in pairs], dtype=np.int64)
        bs = np.array([p[1] for p in pairs], dtype=np.int64)
        sketch_update_arrays(self.state, rs, bs)

    def submit_response(self, nonce: bytes, b: int) -> None:
        """Wire-level report: the server already knows r for the nonce."""
        r = self._challenges.get(nonce)
        if r is None:
            raise RejectedReportError("unknown or already-used challenge")
        self.submit(Report(challenge=Challenge(nonce=nonce, r=r), b=b))

    def published(self) -> set[int]:
        return publish_heavy(self.state, self.tau)


def _hex_width(l: int) -> int:
    return (l + 3) // 4


def handle_line(server: HeavyHitterServer, line: str) -> str:
    """One request/response exchange of the line protocol.

    CHALLENGE?            -> nonce_hex,r_hex
    REPORT nonce_hex,b    -> OK            (or ERR <reason>)
    PUBLISHED?            -> comma-separated hex x values (empty line if none)
    """
    line = line.strip()
    width = _hex_width(server.l)
    if line == "CHALLENGE?":
        ch = server.issue_challenge()
        return f"{ch.nonce.hex()},{ch.r:0{width}x}"
    if line.startswith("REPORT "):
        try:
            nonce_hex, b_text = line[len("REPORT ") :].split(",")
            nonce = bytes.fromhex(nonce_hex)
            b = int(b_text)
        except ValueError:
            return "ERR malformed report"
        try:
            server.submit_response(nonce, b)
        except RejectedReportError as exc:
            return f"ERR {exc}"
        return "OK"
    if line == "PUBLISHED?":
        try:
            xs = sorted(server.published())
        except EmptySketchError:
            return ""
        return ",".join(f"{x:0{width}x}" for x in xs)
    return "ERR unknown command"
