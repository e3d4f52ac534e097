"""Mechanism and estimator tests: exact probabilities, oracles, distributions."""
import math
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from healthtokens import dp


def make_policy(k, exp_epsilon, **kw):
    return dp.Policy(policy_id=bytes(16), k=k, exp_epsilon=exp_epsilon, **kw)


# --- epsilon parsing ----------------------------------------------------


def test_parse_epsilon_log_forms():
    assert dp.parse_epsilon("log(3)") == Fraction(3)
    assert dp.parse_epsilon("log(5/3)") == Fraction(5, 3)
    assert dp.parse_epsilon("log(7)") == Fraction(7)


def test_parse_epsilon_decimal_snaps_to_rational():
    # ln 3 in double precision is close enough that the rational rounding
    # recovers 3 exactly.
    assert dp.parse_epsilon(math.log(3)) == Fraction(3)
    assert dp.parse_epsilon(str(math.log(3))) == Fraction(3)
    assert dp.parse_epsilon("1.0") == dp.exp_epsilon_from_epsilon(1)


def test_parse_epsilon_rejects_nonpositive_and_garbage():
    for bad in ("log(1)", "log(1/2)", "0", "-1", "log(0)", "log(-3)"):
        with pytest.raises(dp.DomainError):
            dp.parse_epsilon(bad)
    with pytest.raises(dp.DomainError):
        dp.parse_epsilon("log(π)")
    with pytest.raises(dp.DomainError):
        dp.parse_epsilon("not a number")


# --- policy validation and derived probabilities ------------------------


def test_policy_rejects_bad_parameters():
    good = dict(policy_id=bytes(16), k=2, exp_epsilon=Fraction(3))
    with pytest.raises(dp.DomainError):
        dp.Policy(**{**good, "policy_id": b"short"})
    with pytest.raises(dp.DomainError):
        dp.Policy(**{**good, "k": 1})
    with pytest.raises(dp.DomainError):
        dp.Policy(**{**good, "k": 257})
    with pytest.raises(dp.DomainError):
        dp.Policy(**{**good, "exp_epsilon": Fraction(1)})
    with pytest.raises(dp.DomainError):
        dp.Policy(**{**good, "epoch_seconds": 0})
    with pytest.raises(dp.DomainError):
        dp.Policy(**{**good, "rate_limit": 0})
    with pytest.raises(dp.DomainError):
        dp.Policy(**{**good, "sketch_bits": 25})
    with pytest.raises(dp.DomainError):
        dp.Policy(**{**good, "tau": 1.0})


def test_exact_probabilities_k2_log3():
    pol = make_policy(2, Fraction(3))
    assert pol.p_keep == Fraction(1, 2)
    assert pol.p_true == Fraction(3, 4)
    assert pol.p_other == Fraction(1, 4)
    assert pol.epsilon == pytest.approx(math.log(3))


@given(
    k=st.integers(2, 12),
    num=st.integers(2, 60),
    den=st.integers(1, 20),
)
def test_probabilities_form_a_distribution(k, num, den):
    exp_eps = Fraction(num, den)
    if exp_eps <= 1:
        exp_eps = 1 + exp_eps
    pol = make_policy(k, exp_eps)
    assert pol.p_true + (k - 1) * pol.p_other == 1
    assert pol.p_true == pol.p_keep + (1 - pol.p_keep) / k


@given(
    k=st.integers(2, 12),
    num=st.integers(2, 60),
    den=st.integers(1, 20),
    i=st.integers(0, 11),
)
def test_pmf_ratio_is_exactly_exp_epsilon(k, num, den, i):
    # the privacy bound: any output is at most e^eps times likelier under
    # one input than another, with equality somewhere
    exp_eps = Fraction(num, den)
    if exp_eps <= 1:
        exp_eps = 1 + exp_eps
    pol = make_policy(k, exp_eps)
    i %= k
    pmf = dp.response_pmf(pol, i)
    assert sum(pmf) == 1
    assert max(pmf) / min(pmf) == exp_eps


def test_no_noise_cap():
    pol = make_policy(2, dp.EXP_EPSILON_CAP)
    assert pol.no_noise
    assert pol.p_keep == 1
    assert pol.p_true == 1
    assert pol.p_other == 0
    rng = random.Random(0)
    assert all(dp.randomize(1, pol, rng) == 1 for _ in range(200))


# --- randomize ----------------------------------------------------------


def test_randomize_validates_domain(policy2):
    for bad in (-1, 2, 97):
        with pytest.raises(dp.DomainError):
            dp.randomize(bad, policy2)
    with pytest.raises(dp.DomainError):
        dp.randomize(0.5, policy2)
    with pytest.raises(dp.DomainError):
        dp.randomize(True, policy2)


def test_randomize_matches_exact_pmf_chisquare():
    pol = make_policy(3, Fraction(3))
    rng = random.Random(12345)
    n = 100_000
    counts = [0] * 3
    for _ in range(n):
        counts[dp.randomize(1, pol, rng)] += 1
    expected = [float(p) * n for p in dp.response_pmf(pol, 1)]
    _, pvalue = stats.chisquare(counts, expected)
    assert pvalue > 1e-6


def test_randomize_many_matches_exact_pmf_chisquare():
    pol = make_policy(4, Fraction(5, 3))
    rng = np.random.default_rng(7)
    n = 1_000_000
    out = dp.randomize_many(np.full(n, 2), pol, rng)
    counts = np.bincount(out, minlength=4)
    expected = [float(p) * n for p in dp.response_pmf(pol, 2)]
    _, pvalue = stats.chisquare(counts, expected)
    assert pvalue > 1e-6


def test_randomize_many_validates_domain(policy2):
    rng = np.random.default_rng(0)
    with pytest.raises(dp.DomainError):
        dp.randomize_many([0, 2], policy2, rng)
    with pytest.raises(dp.DomainError):
        dp.randomize_many([-1], policy2, rng)
    assert dp.randomize_many([], policy2, rng).size == 0


# --- debias -------------------------------------------------------------


def test_debias_running_example(policy2):
    # 75/25 split of responses at k=2, e^eps=3 is the exact expectation of
    # an all-level-0 group, so it must debias to (1, 0)
    est = dp.debias([75, 25], policy2)
    assert est.per_level == (1.0, 0.0)
    assert est.n == 100


def test_debias_inverts_expected_tally_exactly():
    for k, exp_eps, truth in [(2, Fraction(3), 0), (3, Fraction(3), 2), (4, Fraction(7), 1)]:
        pol = make_policy(k, exp_eps)
        pmf = dp.response_pmf(pol, truth)
        denom = math.lcm(*(p.denominator for p in pmf))
        tally = [int(p * denom) for p in pmf]
        est = dp.debias(tally, pol)
        expected = tuple(1.0 if i == truth else 0.0 for i in range(k))
        assert est.per_level == expected


def test_debias_errors(policy2):
    with pytest.raises(dp.EmptyAggregateError):
        dp.debias([0, 0], policy2)
    with pytest.raises(dp.DomainError):
        dp.debias([1, 2, 3], policy2)
    with pytest.raises(dp.DomainError):
        dp.debias([-1, 2], policy2)


@given(
    counts=st.lists(st.integers(0, 10_000), min_size=2, max_size=6),
    num=st.integers(2, 40),
    den=st.integers(1, 13),
)
def test_debias_always_sums_to_one(counts, num, den):
    if sum(counts) == 0:
        counts[0] = 1
    exp_eps = Fraction(num, den)
    if exp_eps <= 1:
        exp_eps = 1 + exp_eps
    pol = make_policy(len(counts), exp_eps)
    est = dp.debias(counts, pol)
    assert sum(est.per_level) == pytest.approx(1.0, abs=1e-9)
    assert est.n == sum(counts)


def test_frequency_estimate_validation():
    with pytest.raises(dp.DomainError):
        dp.FrequencyEstimate(per_level=(0.5, 0.4), n=10)
    with pytest.raises(dp.EmptyAggregateError):
        dp.FrequencyEstimate(per_level=(1.0, 0.0), n=0)


def test_unbiasedness_over_seeds():
    # mean of the estimator over repeated runs tracks the fixed truth
    pol = make_policy(3, Fraction(3))
    truth = np.repeat([0, 1, 2], [25_000, 15_000, 10_000])
    f_true = np.array([0.5, 0.3, 0.2])
    seeds = 20
    estimates = np.empty((seeds, 3))
    for s in range(seeds):
        rng = np.random.default_rng(1000 + s)
        out = dp.randomize_many(truth, pol, rng)
        est = dp.debias(np.bincount(out, minlength=3).tolist(), pol)
        estimates[s] = est.per_level
    mean = estimates.mean(axis=0)
    se = estimates.std(axis=0, ddof=1) / math.sqrt(seeds)
    assert (np.abs(mean - f_true) <= 4 * se + 1e-12).all()


# --- risk summaries -----------------------------------------------------


def test_expected_risk_and_risk_sum(policy2):
    est = dp.FrequencyEstimate(per_level=(0.5, 0.5), n=10)
    assert dp.expected_risk(est) == pytest.approx(0.5)
    # exact counter-expectation: 30/70 responses at k=2 debias to
    # frequencies (0.1, 0.9); risk sum = 100 * 0.9
    assert dp.estimate_risk_sum([30, 70], policy2) == pytest.approx(90.0)
    # small-sample estimates can leave the simplex: all-zero responses
    # debias below zero at level 1
    assert dp.estimate_risk_sum([10, 0], policy2) == pytest.approx(-5.0)
