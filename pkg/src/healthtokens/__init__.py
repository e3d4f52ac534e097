"""Privacy-preserving health risk tokens.

Users carry short signed credentials whose risk value went through k-ary
randomized response at issuance, so any single token proves little about
its holder while verified tokens still aggregate into unbiased group risk
estimates.  Submodules: ``dp`` (mechanism and estimator), ``token``
(credential format and signatures), ``aggregate`` (tallies and event
logs), ``ratelimit`` (per-epoch replay caps), ``admission`` (shop
threshold rules and simulator), ``heavyhitter`` (cross-provider over-use
sketch), ``experiments`` (accuracy studies), ``cli`` (the ``htok`` tool).
"""
from .dp import (
    DomainError,
    EmptyAggregateError,
    FrequencyEstimate,
    Policy,
    debias,
    estimate_risk_sum,
    expected_risk,
    parse_epsilon,
    randomize,
    response_pmf,
)
from .token import (
    SignedToken,
    Tid,
    TokenError,
    TokenPayload,
    TrustStore,
    decode_text,
    encode_text,
    generate_signing_key,
    issue,
    verify,
)

__version__ = "0.1.0"

__all__ = [
    "DomainError",
    "EmptyAggregateError",
    "FrequencyEstimate",
    "Policy",
    "debias",
    "estimate_risk_sum",
    "expected_risk",
    "parse_epsilon",
    "randomize",
    "response_pmf",
    "SignedToken",
    "Tid",
    "TokenError",
    "TokenPayload",
    "TrustStore",
    "decode_text",
    "encode_text",
    "generate_signing_key",
    "issue",
    "verify",
    "__version__",
]
