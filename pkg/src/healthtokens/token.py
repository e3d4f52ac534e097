"""Signed health-token credential: payload codec, signing, verification.

A token is a fixed 37-byte payload followed by an ECDSA signature over
those bytes.  The signature bytes double as the token identifier (TID):
ECDSA nonces are randomized, so two issuances never share a TID except
with negligible probability.  The text form (QR payload) is unpadded
base64url of payload || signature and is strictly canonical: any string
that does not re-encode to itself is rejected.
"""
from __future__ import annotations

import base64
import binascii
import hashlib
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec

from .dp import Policy, RiskStatus, randomize

__all__ = [
    "MAGIC",
    "PAYLOAD_LEN",
    "SCHEMES",
    "TokenError",
    "MalformedTokenError",
    "UntrustedIssuerError",
    "InvalidSignatureError",
    "UnknownPolicyError",
    "ExpiredTokenError",
    "TokenPayload",
    "SignedToken",
    "Tid",
    "TrustStore",
    "generate_signing_key",
    "key_id",
    "save_private_key",
    "load_private_key",
    "save_public_key",
    "load_public_key",
    "issue",
    "verify",
    "encode_text",
    "decode_text",
]

MAGIC = b"HTK1"
PAYLOAD_LEN = 37
# Floor for a plausible ECDSA signature; real P-256 DER signatures are ~70 bytes.
MIN_SIGNATURE_LEN = 8

# scheme name -> (curve, hash). "p521" honours the 512-bit-class prototype
# setting; "p256" is the pragmatic default.
SCHEMES = {
    "p256": (ec.SECP256R1(), hashes.SHA256()),
    "p521": (ec.SECP521R1(), hashes.SHA512()),
}

_CURVE_HASH = {
    "secp256r1": hashes.SHA256(),
    "secp521r1": hashes.SHA512(),
}


class TokenError(Exception):
    """Base class for all verification failures."""

    code = "error"


class MalformedTokenError(TokenError):
    """Bad magic, truncation, wrong length, or non-canonical text encoding."""

    code = "malformed"


class UntrustedIssuerError(TokenError):
    """issuer_key_id does not match any key in the trust store."""

    code = "untrusted"


class InvalidSignatureError(TokenError):
    """Signature does not verify over the payload bytes."""

    code = "invalid-signature"


class UnknownPolicyError(TokenError):
    """payload.policy_id is not in the verifier's policy registry."""

    code = "unknown-policy"


class ExpiredTokenError(TokenError):
    """issued_at falls outside the policy validity window."""

    code = "expired"


@dataclass(frozen=True)
class TokenPayload:
    """The 37-byte credential body.

    Canonical encoding is the plain field concatenation:
    magic(4) || policy_id(16) || token_value(1) || issuer_key_id(8) ||
    issued_at(8, unsigned big-endian seconds).
    """

    policy_id: bytes
    token_value: int
    issuer_key_id: bytes
    issued_at: int

    def __post_init__(self):
        if len(self.policy_id) != 16:
            raise ValueError("policy_id must be 16 bytes")
        if not 0 <= self.token_value <= 255:
            raise ValueError("token_value must fit in one byte")
        if len(self.issuer_key_id) != 8:
            raise ValueError("issuer_key_id must be 8 bytes")
        if not 0 <= self.issued_at < 2**64:
            raise ValueError("issued_at must be an unsigned 64-bit integer")

    def encode(self) -> bytes:
        return (
            MAGIC
            + self.policy_id
            + bytes([self.token_value])
            + self.issuer_key_id
            + self.issued_at.to_bytes(8, "big")
        )

    @classmethod
    def decode(cls, blob: bytes) -> "TokenPayload":
        if len(blob) != PAYLOAD_LEN:
            raise MalformedTokenError(f"payload must be {PAYLOAD_LEN} bytes, got {len(blob)}")
        if blob[:4] != MAGIC:
            raise MalformedTokenError("bad magic")
        return cls(
            policy_id=blob[4:20],
            token_value=blob[20],
            issuer_key_id=blob[21:29],
            issued_at=int.from_bytes(blob[29:37], "big"),
        )


@dataclass(frozen=True)
class Tid:
    """Token identifier: the full signature byte string."""

    bytes: bytes

    def hash16(self) -> bytes:
        """Truncated SHA-256 used by ledgers: first 16 digest bytes."""
        return hashlib.sha256(self.bytes).digest()[:16]

    def hash_hex(self) -> str:
        """Event-log column form: first 16 hex chars of SHA-256."""
        return hashlib.sha256(self.bytes).hexdigest()[:16]


@dataclass(frozen=True)
class SignedToken:
    payload: TokenPayload
    signature: bytes

    @property
    def tid(self) -> Tid:
        return Tid(self.signature)

    def encode(self) -> bytes:
        return self.payload.encode() + self.signature


def generate_signing_key(scheme: str = "p256") -> ec.EllipticCurvePrivateKey:
    try:
        curve, _ = SCHEMES[scheme]
    except KeyError:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {sorted(SCHEMES)}")
    return ec.generate_private_key(curve)


def _hash_for(key) -> hashes.HashAlgorithm:
    try:
        return _CURVE_HASH[key.curve.name]
    except KeyError:
        raise ValueError(f"unsupported curve {key.curve.name!r}")


def key_id(public_key: ec.EllipticCurvePublicKey) -> bytes:
    """Truncated SHA-256 of the DER SubjectPublicKeyInfo encoding (8 bytes)."""
    spki = public_key.public_bytes(
        serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
    )
    return hashlib.sha256(spki).digest()[:8]


def save_private_key(key: ec.EllipticCurvePrivateKey, path) -> None:
    pem = key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )
    with open(path, "wb") as fh:
        fh.write(pem)


def load_private_key(path) -> ec.EllipticCurvePrivateKey:
    with open(path, "rb") as fh:
        return serialization.load_pem_private_key(fh.read(), password=None)


def save_public_key(key: ec.EllipticCurvePublicKey, path) -> None:
    pem = key.public_bytes(
        serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo
    )
    with open(path, "wb") as fh:
        fh.write(pem)


def load_public_key(path) -> ec.EllipticCurvePublicKey:
    with open(path, "rb") as fh:
        return serialization.load_pem_public_key(fh.read())


class TrustStore:
    """Read-only map from issuer_key_id to public key."""

    def __init__(self, public_keys=()):
        self._keys = {key_id(pub): pub for pub in public_keys}

    def lookup(self, kid: bytes):
        try:
            return self._keys[kid]
        except KeyError:
            raise UntrustedIssuerError(f"no trusted issuer with key id {kid.hex()}")

    def __len__(self):
        return len(self._keys)

    def __contains__(self, kid: bytes) -> bool:
        return kid in self._keys


def issue(
    i_true: RiskStatus,
    policy: Policy,
    signing_key: ec.EllipticCurvePrivateKey,
    now: int,
    rng=None,
) -> tuple[SignedToken, RiskStatus]:
    """Randomize a true risk level, sign the result, return token and truth.

    The caller (the user) learns ``i_true`` regardless of the randomized
    value baked into the token.
    """
    value = randomize(i_true, policy, rng)
    payload = TokenPayload(
        policy_id=policy.policy_id,
        token_value=value,
        issuer_key_id=key_id(signing_key.public_key()),
        issued_at=int(now),
    )
    signature = signing_key.sign(payload.encode(), ec.ECDSA(_hash_for(signing_key)))
    return SignedToken(payload=payload, signature=signature), i_true


def verify(
    blob: bytes,
    trust_store: TrustStore,
    policy_registry,
    now: int,
) -> tuple[TokenPayload, Tid]:
    """Check a binary token and return its payload and TID.

    Error precedence is fixed so independent verifiers behave identically:
    malformed, then untrusted issuer, then invalid signature, then unknown
    policy, then expired.  ``policy_registry`` is any mapping from 16-byte
    policy_id to Policy.
    """
    if len(blob) < PAYLOAD_LEN + MIN_SIGNATURE_LEN:
        raise MalformedTokenError(f"token too short ({len(blob)} bytes)")
    payload = TokenPayload.decode(blob[:PAYLOAD_LEN])
    signature = blob[PAYLOAD_LEN:]

    public_key = trust_store.lookup(payload.issuer_key_id)
    try:
        public_key.verify(signature, blob[:PAYLOAD_LEN], ec.ECDSA(_hash_for(public_key)))
    except InvalidSignature:
        raise InvalidSignatureError("signature does not verify")

    try:
        policy = policy_registry[payload.policy_id]
    except KeyError:
        raise UnknownPolicyError(f"unknown policy {payload.policy_id.hex()}")
    if payload.token_value >= policy.k:
        # Signed by a trusted issuer yet outside the policy domain: treat as
        # malformed content rather than inventing a new failure mode.
        raise MalformedTokenError(
            f"token value {payload.token_value} outside policy k={policy.k}"
        )

    if not payload.issued_at <= now < payload.issued_at + policy.epoch_seconds:
        raise ExpiredTokenError(
            f"issued_at {payload.issued_at} outside validity window at {now}"
        )
    return payload, Tid(signature)


def encode_text(token: SignedToken) -> str:
    """Unpadded base64url of payload || signature (the QR payload text)."""
    return base64.urlsafe_b64encode(token.encode()).rstrip(b"=").decode("ascii")


def decode_text(text: str) -> SignedToken:
    """Exact inverse of :func:`encode_text`.

    Rejects anything that is not the canonical encoding of some byte
    string (wrong alphabet, bad length mod 4, or nonzero trailing bits),
    so two distinct accepted strings never decode to the same token.
    """
    if not text:
        raise MalformedTokenError("empty token text")
    if len(text) % 4 == 1:
        raise MalformedTokenError("impossible base64url length")
    padded = text + "=" * (-len(text) % 4)
    try:
        raw = base64.urlsafe_b64decode(padded.encode("ascii"))
    except (binascii.Error, ValueError, UnicodeEncodeError):
        raise MalformedTokenError("not valid base64url")
    # Canonicity: lenient decoders drop nonzero trailing bits; re-encode and compare.
    if base64.urlsafe_b64encode(raw).rstrip(b"=").decode("ascii") != text:
        raise MalformedTokenError("non-canonical base64url encoding")
    if len(raw) < PAYLOAD_LEN + MIN_SIGNATURE_LEN:
        raise MalformedTokenError("decoded token too short")
    payload = TokenPayload.decode(raw[:PAYLOAD_LEN])
    return SignedToken(payload=payload, signature=raw[PAYLOAD_LEN:])
