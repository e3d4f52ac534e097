"""k-ary randomized response and its unbiased frequency estimator.

The mechanism keeps the true risk level with a biased coin and otherwise
answers uniformly at random, so the total probability of reporting the
truth is e^eps / (e^eps + k - 1) and every other level gets
1 / (e^eps + k - 1).  Aggregators invert that channel with an affine
debiasing step whose coefficients are exact rationals of e^eps, so the
same tally debiases to the same estimate on every platform.
"""
from __future__ import annotations

import math
import random
import secrets
from dataclasses import dataclass
from decimal import Decimal, localcontext
from fractions import Fraction
from typing import Sequence

import numpy as np

__all__ = [
    "DomainError",
    "EmptyAggregateError",
    "Policy",
    "RiskStatus",
    "FrequencyEstimate",
    "parse_epsilon",
    "exp_epsilon_from_epsilon",
    "default_rng",
    "randomize",
    "randomize_many",
    "response_pmf",
    "debias",
    "expected_risk",
    "estimate_risk_sum",
]

# e^eps at or above this bound is treated as the no-noise limit (p_keep = 1).
EXP_EPSILON_CAP = Fraction(10**18)

# Denominator cap when rounding a decimal epsilon to a rational e^eps.
RATIONAL_DENOMINATOR_LIMIT = 10**6

RiskStatus = int


class DomainError(ValueError):
    """A value is outside the mechanism's domain (bad level, bad epsilon)."""


class EmptyAggregateError(ValueError):
    """Debiasing was asked for with zero collected responses."""


def exp_epsilon_from_epsilon(epsilon: float | str | Decimal) -> Fraction:
    """Convert a decimal epsilon to a rational e^epsilon.

    Uses 50-digit decimal exponentiation, then rounds to the nearest
    rational with denominator <= 10^6 so the stored parameter is exact
    and platform independent.
    """
    with localcontext() as ctx:
        ctx.prec = 50
        value = Decimal(str(epsilon)).exp()
    return Fraction(value).limit_denominator(RATIONAL_DENOMINATOR_LIMIT)


def parse_epsilon(text: str | float | Fraction) -> Fraction:
    """Parse an epsilon spelling into the rational e^epsilon.

    Accepted forms:
      * ``log(3)`` or ``log(5/3)``: e^epsilon is exactly the rational inside.
      * a plain number such as ``1.0986``: converted via
        :func:`exp_epsilon_from_epsilon`.
      * an existing :class:`~fractions.Fraction`, taken as e^epsilon itself.
    """
    if isinstance(text, Fraction):
        exp_eps = text
    elif isinstance(text, (int, float)):
        exp_eps = exp_epsilon_from_epsilon(text)
    else:
        s = text.strip()
        if s.startswith("log(") and s.endswith(")"):
            inner = s[4:-1]
            try:
                exp_eps = Fraction(inner)
            except (ValueError, ZeroDivisionError) as exc:
                raise DomainError(f"bad rational inside log(...): {inner!r}") from exc
        else:
            try:
                exp_eps = exp_epsilon_from_epsilon(s)
            except (ValueError, ArithmeticError) as exc:
                raise DomainError(f"cannot parse epsilon: {text!r}") from exc
    if exp_eps <= 1:
        raise DomainError(f"epsilon must be positive (e^epsilon = {exp_eps} <= 1)")
    return exp_eps


@dataclass(frozen=True)
class Policy:
    """Public mechanism parameters shared by issuers, verifiers and auditors.

    ``exp_epsilon`` is e^epsilon stored as an exact rational; every derived
    probability below is an exact Fraction of it.  ``epoch_seconds`` bounds
    both token validity and the rate-limit window, ``rate_limit`` caps uses
    of one TID per provider per epoch, and ``sketch_bits``/``tau`` configure
    the cross-provider over-use sketch.
    """

    policy_id: bytes
    k: int
    exp_epsilon: Fraction
    epoch_seconds: int = 86400
    rate_limit: int = 3
    sketch_bits: int = 16
    tau: float = 0.02

    def __post_init__(self):
        if len(self.policy_id) != 16:
            raise DomainError("policy_id must be exactly 16 bytes")
        if self.k < 2:
            raise DomainError(f"k must be >= 2, got {self.k}")
        if self.k > 256:
            raise DomainError("k must fit in one byte (k <= 256)")
        object.__setattr__(self, "exp_epsilon", Fraction(self.exp_epsilon))
        if self.exp_epsilon <= 1:
            raise DomainError(
                f"e^epsilon must exceed 1 (epsilon > 0), got {self.exp_epsilon}"
            )
        if self.epoch_seconds <= 0:
            raise DomainError("epoch_seconds must be positive")
        if self.rate_limit <= 0:
            raise DomainError("rate_limit must be positive")
        if not 1 <= self.sketch_bits <= 24:
            raise DomainError("sketch_bits must be in [1, 24]")
        if not 0 < self.tau < 1:
            raise DomainError("tau must lie strictly between 0 and 1")

    @property
    def no_noise(self) -> bool:
        """True when e^epsilon is at/above the cap: the truth is always kept."""
        return self.exp_epsilon >= EXP_EPSILON_CAP

    @property
    def p_keep(self) -> Fraction:
        """First-step probability of keeping the truth: (e^eps - 1) / (e^eps + k - 1)."""
        if self.no_noise:
            return Fraction(1)
        return (self.exp_epsilon - 1) / (self.exp_epsilon + self.k - 1)

    @property
    def p_true(self) -> Fraction:
        """Total probability the output equals the input: e^eps / (e^eps + k - 1)."""
        if self.no_noise:
            return Fraction(1)
        return self.exp_epsilon / (self.exp_epsilon + self.k - 1)

    @property
    def p_other(self) -> Fraction:
        """Probability of each specific wrong output: 1 / (e^eps + k - 1)."""
        if self.no_noise:
            return Fraction(0)
        return 1 / (self.exp_epsilon + self.k - 1)

    @property
    def epsilon(self) -> float:
        """Float epsilon, for display only; arithmetic uses exp_epsilon."""
        return math.log(self.exp_epsilon)

    def validate_status(self, value: int) -> int:
        if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
            raise DomainError(f"risk status must be an integer, got {value!r}")
        if not 0 <= value < self.k:
            raise DomainError(f"risk status {value} outside {{0..{self.k - 1}}}")
        return int(value)


@dataclass(frozen=True)
class FrequencyEstimate:
    """Debiased per-level frequencies plus the response count behind them.

    Individual entries may be negative; debiasing is affine and only the
    simplex sum is preserved.  Consumers needing a proper distribution
    must project separately.
    """

    per_level: tuple[float, ...]
    n: int

    def __post_init__(self):
        object.__setattr__(self, "per_level", tuple(float(x) for x in self.per_level))
        if self.n <= 0:
            raise EmptyAggregateError("estimate requires at least one response")
        total = sum(self.per_level)
        if abs(total - 1.0) > 1e-9:
            raise DomainError(f"per_level must sum to 1, got {total!r}")

    @property
    def k(self) -> int:
        return len(self.per_level)


def default_rng() -> random.SystemRandom:
    """Production randomness source: cryptographically secure, not seedable."""
    return random.SystemRandom()


def _bernoulli(p: Fraction, rng) -> bool:
    # Exact rational coin: no float rounding in the comparison.
    return rng.randrange(p.denominator) < p.numerator


def randomize(i_true: RiskStatus, policy: Policy, rng=None) -> RiskStatus:
    """Apply k-ary randomized response to one risk level.

    Implemented literally as the two-step mechanism: keep the truth with
    probability ``p_keep``, otherwise answer uniformly over all k levels
    (the uniform branch can still land on the truth).  ``rng`` needs only
    ``randrange``; any ``random.Random`` works, and the default is a
    secure system generator.
    """
    policy.validate_status(i_true)
    if rng is None:
        rng = default_rng()
    if _bernoulli(policy.p_keep, rng):
        return i_true
    return rng.randrange(policy.k)


def randomize_many(
    truths: np.ndarray | Sequence[int], policy: Policy, rng: np.random.Generator
) -> np.ndarray:
    """Vectorized two-step randomized response over an array of levels.

    Same exact keep probability as :func:`randomize` (integer comparison
    against the rational p_keep), drawn from a numpy Generator instead of
    the scalar source.  Used by the simulation harnesses.
    """
    truths = np.asarray(truths, dtype=np.int64)
    if truths.size and (truths.min() < 0 or truths.max() >= policy.k):
        raise DomainError("risk status outside policy domain")
    p = policy.p_keep
    keep = rng.integers(0, p.denominator, size=truths.shape) < p.numerator
    uniform = rng.integers(0, policy.k, size=truths.shape)
    return np.where(keep, truths, uniform)


def response_pmf(policy: Policy, i_true: RiskStatus) -> list[Fraction]:
    """Exact output distribution of :func:`randomize` for a given input."""
    policy.validate_status(i_true)
    pmf = [policy.p_other] * policy.k
    pmf[i_true] = policy.p_true
    return pmf


def debias(tally: Sequence[int], policy: Policy) -> FrequencyEstimate:
    """Invert the randomized-response channel on a vector of response counts.

    With p = e^eps/(e^eps+k-1) the truth probability and
    q = 1/(e^eps+k-1) the per-wrong-level probability, the unbiased
    estimate of the true frequency of level i is

        f_hat[i] = (tally[i]/n - q) / (p - q)

    which is the affine debiasing correction with scale
    (e^eps + k - 1)/(e^eps - 1).  Entries may be negative; the vector
    always sums to exactly 1.  Computed in exact rational arithmetic.
    """
    counts = [int(c) for c in tally]
    if len(counts) != policy.k:
        raise DomainError(f"tally has {len(counts)} levels, policy has k={policy.k}")
    if any(c < 0 for c in counts):
        raise DomainError("tally counts must be non-negative")
    n = sum(counts)
    if n == 0:
        raise EmptyAggregateError("cannot debias an empty tally")
    q = policy.p_other
    scale = policy.p_true - q  # equals p_keep
    per_level = tuple(float((Fraction(c, n) - q) / scale) for c in counts)
    return FrequencyEstimate(per_level=per_level, n=n)


def expected_risk(est: FrequencyEstimate) -> float:
    """Expected token value under the estimated level frequencies: sum(i * f_hat[i])."""
    return float(sum(i * f for i, f in enumerate(est.per_level)))


def estimate_risk_sum(tally: Sequence[int], policy: Policy) -> float:
    """Debiased total transmission risk of a group: n * expected_risk(debias(tally))."""
    est = debias(tally, policy)
    return est.n * expected_risk(est)


def random_policy_id() -> bytes:
    """Fresh 16-byte policy identifier."""
    return secrets.token_bytes(16)
