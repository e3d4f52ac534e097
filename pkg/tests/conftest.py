"""Shared fixtures plus the acceptance-criteria summary printer."""
from fractions import Fraction

import pytest

from healthtokens import dp, token

# criterion number -> (passed, one-line detail); filled by test_acceptance
_ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def record_criterion(num: int, passed: bool, detail: str) -> None:
    _ACCEPTANCE_RESULTS[num] = (bool(passed), detail)


@pytest.fixture(scope="session")
def p256_key():
    return token.generate_signing_key("p256")


@pytest.fixture
def policy2():
    """k = 2, e^eps = 3 (eps = log 3), the running example parameters."""
    return dp.Policy(policy_id=bytes(range(16)), k=2, exp_epsilon=Fraction(3))


@pytest.fixture
def policy3():
    return dp.Policy(policy_id=bytes(range(16, 32)), k=3, exp_epsilon=Fraction(3))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE_RESULTS):
        passed, detail = _ACCEPTANCE_RESULTS[num]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d}: {verdict} - {detail}")
