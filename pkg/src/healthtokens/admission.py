"""Threshold admission on in-shop risk, plus batch admission.

The shop tracks r, the sum of token values of everyone inside, against a
cap R.  A single entrant is admitted iff r - t_exit + t_next <= R; batch
mode evaluates the next b queue members as one unit (all or nothing) so a
queue observer cannot attribute the decision to any individual.  The
discrete-event simulator drives these rules with Poisson arrivals and
exponential dwell times.
"""
from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field
from typing import Sequence

from .dp import Policy, randomize

__all__ = ["ShopState", "TraceRow", "admit_decision", "admit_batch", "simulate"]


@dataclass
class ShopState:
    """Current occupancy: the cap R, the multiset of values inside, and their sum."""

    R: float
    inside: list[int] = field(default_factory=list)

    @property
    def r(self) -> int:
        return sum(self.inside)

    def remove(self, value: int) -> None:
        self.inside.remove(value)


def admit_decision(state: ShopState, t_next: int, t_exit: int | None = None) -> bool:
    """Single admission rule: admit iff r - t_exit + t_next <= R.

    ``t_exit`` covers the simultaneous exit case and counts as 0 when
    absent.  On admit, the exit is applied and the entrant added; on
    reject, the state is left unchanged.
    """
    if t_exit is not None and t_exit not in state.inside:
        raise ValueError(f"exiting value {t_exit} is not inside the shop")
    exiting = 0 if t_exit is None else t_exit
    if state.r - exiting + t_next > state.R:
        return False
    if t_exit is not None:
        state.remove(t_exit)
    state.inside.append(t_next)
    return True


def admit_batch(
    state: ShopState, queue: Sequence[int], batch_size: int
) -> tuple[list[int], list[int]]:
    """Evaluate the next ``batch_size`` queue members as one unit.

    All are admitted iff r + sum(batch) <= R, otherwise all are rejected,
    even when a prefix would fit: per-member decisions would leak the
    individual signal that batching exists to mask.  Returns
    (admitted, rejected); members beyond the batch stay queued.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    batch = list(queue[:batch_size])
    if state.r + sum(batch) > state.R:
        return [], batch
    state.inside.extend(batch)
    return batch, []


@dataclass(frozen=True)
class TraceRow:
    time: float
    event: str  # "arrival" or "depart"
    token_value: int
    r: int
    decision: str  # "admit", "reject", or "" for departures


def _draw_level(rng: random.Random, cumulative: list[float]) -> int:
    u = rng.random()
    for level, edge in enumerate(cumulative):
        if u < edge:
            return level
    return len(cumulative) - 1


def simulate(
    policy: Policy,
    R: float,
    duration: float,
    rng: random.Random,
    arrival_rate: float,
    mean_dwell: float,
    batch_size: int | None = None,
    truth_weights: Sequence[float] | None = None,
) -> list[TraceRow]:
    """Run the shop as a discrete-event simulation and return its trace.

    Arrivals are Poisson(``arrival_rate``); each customer carries a token
    randomized from a true level drawn with ``truth_weights`` (uniform by
    default).  Admitted customers stay Exp(``mean_dwell``) and the
    departure queue pops the earliest scheduled exit.  ``batch_size=None``
    is single mode (one decision per arrival); an integer switches to batch
    mode, deciding whole groups of that size.  R may be ``math.inf``.

    The trace is deterministic given the rng seed: draws happen in a fixed
    order (next interarrival when an arrival fires, truth then response per
    customer, dwell only on admit).
    """
    if arrival_rate < 0 or mean_dwell <= 0:
        raise ValueError("rates must be positive (arrival_rate may be 0)")
    weights = list(truth_weights) if truth_weights is not None else [1.0] * policy.k
    if len(weights) != policy.k or any(w < 0 for w in weights) or sum(weights) <= 0:
        raise ValueError("truth weights must be k non-negative numbers, not all zero")
    total = float(sum(weights))
    cumulative, acc = [], 0.0
    for w in weights:
        acc += w / total
        cumulative.append(acc)

    state = ShopState(R=R)
    trace: list[TraceRow] = []
    events: list[tuple[float, int, str, int]] = []  # (time, seq, kind, value)
    seq = 0
    pending: list[int] = []  # values of queued arrivals awaiting a batch decision
    b = 1 if batch_size is None else int(batch_size)
    if b < 1:
        raise ValueError("batch size must be >= 1")

    if arrival_rate > 0:
        first = rng.expovariate(arrival_rate)
        if first <= duration:
            heapq.heappush(events, (first, seq, "arrival", 0))
            seq += 1

    def decide(now: float, batch: list[int]) -> None:
        nonlocal seq
        if batch_size is None:
            admitted = [v for v in batch if admit_decision(state, v)]
        else:
            admitted, _ = admit_batch(state, batch, len(batch))
        verdict = "admit" if admitted else "reject"
        running_r = state.r - sum(admitted)
        for value in batch:
            if verdict == "admit":
                running_r += value
            trace.append(TraceRow(now, "arrival", value, running_r, verdict))
        for value in admitted:
            dwell = rng.expovariate(1.0 / mean_dwell)
            heapq.heappush(events, (now + dwell, seq, "depart", value))
            seq += 1

    while events:
        now, _, kind, value = heapq.heappop(events)
        if now > duration:
            break
        if kind == "arrival":
            truth = _draw_level(rng, cumulative)
            token_value = randomize(truth, policy, rng)
            pending.append(token_value)
            if len(pending) >= b:
                decide(now, pending[:b])
                del pending[:b]
            nxt = now + rng.expovariate(arrival_rate)
            if nxt <= duration:
                heapq.heappush(events, (nxt, seq, "arrival", 0))
                seq += 1
        else:
            state.remove(value)
            trace.append(TraceRow(now, "depart", value, state.r, ""))
    return trace
