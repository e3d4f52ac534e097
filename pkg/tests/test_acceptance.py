"""Acceptance gate: the eleven go/no-go checks, one test per criterion.

Each test records a one-line verdict that the conftest summary hook prints
at the end of the run, so a bare ``pytest`` shows pass/fail per criterion.
Tolerances are pinned here and nowhere else.
"""
import math
import random
import secrets
import time
from fractions import Fraction

import numpy as np
import pytest

from healthtokens import admission, dp, experiments, heavyhitter as hh, ratelimit, token
from healthtokens.experiments import ExperimentConfig, run_curve

from conftest import record_criterion


def check(num: int, passed, detail: str) -> None:
    record_criterion(num, bool(passed), detail)
    assert passed, f"criterion {num}: {detail}"


def policy_of(k, exp_eps):
    return dp.Policy(policy_id=bytes(16), k=k, exp_epsilon=exp_eps)


def mean_error_at(k, exp_eps, n, trials, seed):
    cfg = ExperimentConfig("acc", k, exp_eps, (n,), trials, seed)
    return run_curve(cfg).error_at(n)


def test_criterion_01_headline_error():
    # k = 2, eps = log 3, uniform truth, 100 trials per n for n = 1..500;
    # mean |error| at n = 500 in [0.02, 0.08]; runtime < 60 s
    start = time.perf_counter()
    cfg = ExperimentConfig("acc", 2, Fraction(3), tuple(range(1, 501)), 100, seed=0)
    curve = run_curve(cfg)
    elapsed = time.perf_counter() - start
    err = curve.error_at(500)
    ok = 0.02 <= err <= 0.08 and elapsed < 60.0
    check(1, ok, f"mean |error| at n=500 = {err:.4f} (want [0.02, 0.08]), {elapsed:.1f}s")


def test_criterion_02_error_grows_with_k():
    # at eps = log 3 and n = 500, err(k=2) < err(k=3) < err(k=4), each seed
    seeds = range(5)
    orderings = []
    for seed in seeds:
        errs = [mean_error_at(k, Fraction(3), 500, 100, seed) for k in (2, 3, 4)]
        orderings.append(errs[0] < errs[1] < errs[2])
    sample = [round(e, 4) for e in (mean_error_at(k, Fraction(3), 500, 100, 0) for k in (2, 3, 4))]
    check(2, all(orderings), f"k=2<3<4 ordering held {sum(orderings)}/5 seeds, e.g. {sample}")


def test_criterion_03_error_shrinks_with_epsilon():
    # at k = 2 and n = 500, error non-increasing across eps = log(5/3),
    # log 3, log 7, each seed; the direction is stated in the report output
    eps_list = [Fraction(5, 3), Fraction(3), Fraction(7)]
    ok_seeds = []
    for seed in range(5):
        errs = [mean_error_at(2, e, 500, 100, seed) for e in eps_list]
        ok_seeds.append(all(a >= b for a, b in zip(errs, errs[1:])))
    curves = [
        run_curve(ExperimentConfig("acc", 2, e, (500,), 100, 0)) for e in eps_list
    ]
    note = experiments.epsilon_direction_note(curves)
    ok = all(ok_seeds) and "non-increasing" in note
    check(3, ok, f"non-increasing in eps for {sum(ok_seeds)}/5 seeds; note: {note}")


def test_criterion_04_unbiasedness():
    # f = (0.7, 0.3), n = 10^4, k = 2, eps = log 3, 200 runs:
    # |mean(f1_hat) - 0.3| <= 4 * sd / sqrt(200)
    pol = policy_of(2, Fraction(3))
    truth = np.repeat([0, 1], [7000, 3000])
    runs = 200
    f1_hats = np.empty(runs)
    for s in range(runs):
        rng = np.random.default_rng(10_000 + s)
        out = dp.randomize_many(truth, pol, rng)
        est = dp.debias(np.bincount(out, minlength=2).tolist(), pol)
        f1_hats[s] = est.per_level[1]
    bias = abs(f1_hats.mean() - 0.3)
    bound = 4 * f1_hats.std(ddof=1) / math.sqrt(runs)
    check(4, bias <= bound, f"|mean f1_hat - 0.3| = {bias:.2e} <= 4 sd/sqrt(200) = {bound:.2e}")


def test_criterion_05_privacy_ratio():
    # analytic PMF ratio equals e^eps to rtol 1e-12 for k in {2,3,4,10},
    # eps in {log 5/3, log 3, log 7}
    worst = 0.0
    for k in (2, 3, 4, 10):
        for exp_eps in (Fraction(5, 3), Fraction(3), Fraction(7)):
            pol = policy_of(k, exp_eps)
            for i in range(k):
                pmf = dp.response_pmf(pol, i)
                for j in range(k):
                    if i == j:
                        continue
                    ratio = pmf[i] / pmf[j]  # exact rational
                    rel = abs(float(ratio) / float(exp_eps) - 1.0)
                    worst = max(worst, rel)
    check(5, worst <= 1e-12, f"max relative deviation of pmf ratio from e^eps = {worst:.2e}")


def test_criterion_06_batched_sketch_equals_naive():
    # integer equality of all counters for l in {1,4,8,10}, 1000 reports,
    # 10 seeds
    all_equal = True
    for l in (1, 4, 8, 10):
        for seed in range(10):
            rng = np.random.default_rng(seed * 1000 + l)
            rs = rng.integers(0, 1 << l, size=1000)
            vs = rng.integers(0, 1 << l, size=1000)
            bs = hh.inner_bits(vs, rs)
            naive, batched = hh.SketchState(l), hh.SketchState(l)
            for r, b in zip(rs, bs):
                hh.sketch_update(naive, int(r), int(b))
            hh.sketch_update_arrays(batched, rs, bs)
            if not np.array_equal(naive.table, batched.table):
                all_equal = False
    check(6, all_equal, "batched transform == naive per-report tables, l in {1,4,8,10} x 10 seeds")


def _sketch_run(rng, l, n, heavy_share):
    """Build a sketch from n reports, heavy_share of them for one real TID."""
    heavy_tid = token.Tid(rng.bytes(40))
    v = hh.tid_index(heavy_tid, l)
    heavy_count = int(n * heavy_share)
    vs = np.concatenate(
        [np.full(heavy_count, v, dtype=np.int64), rng.integers(0, 1 << l, size=n - heavy_count)]
    )
    rs = rng.integers(0, 1 << l, size=n)
    bs = hh.inner_bits(vs, rs)
    state = hh.SketchState(l)
    hh.sketch_update_arrays(state, rs, bs)
    return state, heavy_tid


def test_criterion_07_heavy_hitter_detection():
    # p = 0.05, N = 10^5, tau = 0.02, l = 16: heavy TID published in
    # >= 99/100 seeds; all-unique traffic publishes nothing in >= 95/100
    l, n, tau = 16, 100_000, 0.02
    detected = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        state, heavy_tid = _sketch_run(rng, l, n, heavy_share=0.05)
        if hh.check_published(heavy_tid, hh.publish_heavy(state, tau), l):
            detected += 1
    clean = 0
    for seed in range(100):
        rng = np.random.default_rng(10_000 + seed)
        # unique TIDs: hashed cells are iid uniform over 2^l
        vs = rng.integers(0, 1 << l, size=n)
        rs = rng.integers(0, 1 << l, size=n)
        state = hh.SketchState(l)
        hh.sketch_update_arrays(state, rs, hh.inner_bits(vs, rs))
        if not hh.publish_heavy(state, tau):
            clean += 1
    ok = detected >= 99 and clean >= 95
    check(7, ok, f"heavy TID published {detected}/100 (need >=99); clean runs {clean}/100 (need >=95)")


def test_criterion_08_counter_expectation():
    # mean of T[v]/N over 100 seeds within +-0.02 of p, p in {0.1,0.5,1.0},
    # N = 10^4, l = 12
    l, n = 12, 10_000
    results = {}
    for p in (0.1, 0.5, 1.0):
        ratios = np.empty(100)
        for seed in range(100):
            rng = np.random.default_rng(seed * 7 + 1)
            state, heavy_tid = _sketch_run(rng, l, n, heavy_share=p)
            ratios[seed] = state.table[hh.tid_index(heavy_tid, l)] / n
        results[p] = ratios.mean()
    ok = all(abs(results[p] - p) <= 0.02 for p in results)
    detail = ", ".join(f"p={p}: {results[p]:.4f}" for p in results)
    check(8, ok, f"mean T[v]/N over 100 seeds: {detail} (tolerance +-0.02)")


def test_criterion_09_token_security_surface():
    # 10^4 single-bit mutations all fail verification; 10^4 random tokens
    # encode/decode byte-identically
    pol = policy_of(2, Fraction(3))
    key = token.generate_signing_key("p256")
    trust = token.TrustStore([key.public_key()])
    registry = {pol.policy_id: pol}
    rng = random.Random(99)
    blobs = [token.issue(rng.randrange(2), pol, key, now=1000)[0].encode() for _ in range(50)]
    failures = 0
    trials = 10_000
    for _ in range(trials):
        blob = bytearray(rng.choice(blobs))
        bit = rng.randrange(len(blob) * 8)
        blob[bit // 8] ^= 1 << (bit % 8)
        try:
            token.verify(bytes(blob), trust, registry, now=1000)
        except token.TokenError:
            failures += 1
    round_trips = 0
    for _ in range(trials):
        payload = token.TokenPayload(
            policy_id=rng.randbytes(16),
            token_value=rng.randrange(256),
            issuer_key_id=rng.randbytes(8),
            issued_at=rng.randrange(2**64),
        )
        signed = token.SignedToken(payload, rng.randbytes(rng.randrange(8, 96)))
        if token.decode_text(token.encode_text(signed)).encode() == signed.encode():
            round_trips += 1
    ok = failures == trials and round_trips == trials
    check(9, ok, f"{failures}/{trials} bit-flips rejected; {round_trips}/{trials} byte-identical round trips")


def test_criterion_10_rate_limit_property():
    # random interleavings of 100 TIDs: accepts per (TID, epoch) <= limit,
    # and rollover fully resets
    rng = random.Random(5)
    violations = 0
    resets_ok = True
    for _ in range(50):
        limit = rng.randrange(1, 5)
        epoch_seconds = 100
        ledger = ratelimit.UsageLedger(epoch_seconds=epoch_seconds, rate_limit=limit)
        tids = [token.Tid(i.to_bytes(4, "big") * 12) for i in range(100)]
        accepted: dict[tuple[int, int], int] = {}
        now = 0.0
        for _ in range(2000):
            now += rng.uniform(0, 0.2)
            i = rng.randrange(100)
            if ratelimit.check_and_record(ledger, tids[i], now):
                key = (ratelimit.epoch_of(now, epoch_seconds), i)
                accepted[key] = accepted.get(key, 0) + 1
        if any(c > limit for c in accepted.values()):
            violations += 1
        # rollover: a TID at its cap is accepted again next epoch
        probe = tids[0]
        while ratelimit.check_and_record(ledger, probe, now):
            pass
        if not ratelimit.check_and_record(ledger, probe, now + epoch_seconds):
            resets_ok = False
    ok = violations == 0 and resets_ok
    check(10, ok, f"0 over-limit accepts in 50 interleavings of 100 TIDs; epoch rollover resets")


def test_criterion_11_admission_safety():
    # 10^4-event seeded simulations keep r <= R after every admit, single
    # and batch (b in {1, 5, 20}); b = 1 trace equals single mode
    pol = policy_of(2, Fraction(3))
    R = 6
    # ~10,400 arrivals: >= 10^4 trace events even when batches rarely admit
    kw = dict(R=R, duration=5200.0, arrival_rate=2.0, mean_dwell=3.0)
    safe = True
    sizes = {}
    for batch in (None, 1, 5, 20):
        trace = admission.simulate(pol, rng=random.Random(21), batch_size=batch, **kw)
        sizes[batch] = len(trace)
        inside: list[int] = []
        for row in trace:
            if row.event == "arrival" and row.decision == "admit":
                inside.append(row.token_value)
            elif row.event == "depart":
                inside.remove(row.token_value)
            if sum(inside) > R or row.r != sum(inside):
                safe = False
    single = admission.simulate(pol, rng=random.Random(21), batch_size=None, **kw)
    b1 = admission.simulate(pol, rng=random.Random(21), batch_size=1, **kw)
    events_ok = min(sizes.values()) >= 10_000
    ok = safe and single == b1 and events_ok
    check(
        11,
        ok,
        f"r <= R held across {sizes} events (single, b=1,5,20); b=1 trace == single: {single == b1}",
    )
