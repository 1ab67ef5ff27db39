"""Software key handles and the JSON trust store.

Ed25519 is the default; ECDSA P-256 is available with RFC 6979
deterministic nonces so that signed artifacts are reproducible.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, ed25519

from .errors import ConfigError, UnknownKid

ED25519 = "Ed25519"
ES256 = "ES256"
SUPPORTED_ALGS = (ED25519, ES256)

_P256_ORDER = int("FFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551", 16)


def _public_raw(pub) -> bytes:
    if isinstance(pub, ed25519.Ed25519PublicKey):
        return pub.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    return pub.public_bytes(
        serialization.Encoding.X962, serialization.PublicFormat.CompressedPoint
    )


def _load_public(alg: str, raw: bytes):
    if alg == ED25519:
        return ed25519.Ed25519PublicKey.from_public_bytes(raw)
    if alg == ES256:
        return ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), raw)
    raise ConfigError(f"unsupported alg {alg!r}")


class KeyHandle:
    """A signing key. Signing is serialized per handle."""

    def __init__(self, kid: str, alg: str, private_key):
        if alg not in SUPPORTED_ALGS:
            raise ConfigError(f"unsupported alg {alg!r}")
        self.kid = kid
        self.alg = alg
        self._key = private_key
        self._lock = threading.Lock()

    @classmethod
    def generate(cls, kid: str, alg: str = ED25519, seed: bytes | str | None = None) -> "KeyHandle":
        """New key; with ``seed`` the key is derived deterministically."""
        if seed is not None:
            material = hashlib.sha256(
                b"evgate-key|" + (seed.encode() if isinstance(seed, str) else seed)
            ).digest()
        if alg == ED25519:
            key = (
                ed25519.Ed25519PrivateKey.from_private_bytes(material)
                if seed is not None
                else ed25519.Ed25519PrivateKey.generate()
            )
        elif alg == ES256:
            if seed is not None:
                scalar = int.from_bytes(material, "big") % (_P256_ORDER - 1) + 1
                key = ec.derive_private_key(scalar, ec.SECP256R1())
            else:
                key = ec.generate_private_key(ec.SECP256R1())
        else:
            raise ConfigError(f"unsupported alg {alg!r}")
        return cls(kid, alg, key)

    @property
    def public_bytes(self) -> bytes:
        return _public_raw(self._key.public_key())

    def sign(self, data: bytes) -> bytes:
        with self._lock:
            if self.alg == ED25519:
                return self._key.sign(data)
            return self._key.sign(data, ec.ECDSA(hashes.SHA256(), deterministic_signing=True))

    def trusted(self, not_before: int = 0, not_after: int | None = None) -> "TrustedKey":
        return TrustedKey(self.kid, self.alg, self.public_bytes, not_before, not_after)


@dataclass(frozen=True)
class TrustedKey:
    kid: str
    alg: str
    public_key: bytes
    not_before: int = 0
    not_after: int | None = None

    def verify(self, data: bytes, signature: bytes) -> bool:
        pub = _load_public(self.alg, self.public_key)
        try:
            if self.alg == ED25519:
                pub.verify(signature, data)
            else:
                pub.verify(signature, data, ec.ECDSA(hashes.SHA256()))
        except (InvalidSignature, ValueError):
            return False
        return True

    def valid_at(self, t: int) -> bool:
        return t >= self.not_before and (self.not_after is None or t <= self.not_after)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.alg.encode() + b"|" + self.public_key).hexdigest()

    def to_dict(self) -> dict:
        return {
            "alg": self.alg,
            "not_after": self.not_after,
            "not_before": self.not_before,
            "public_key": self.public_key.hex(),
        }


@dataclass
class TrustStore:
    keys: dict[str, TrustedKey] = field(default_factory=dict)

    def add(self, key: TrustedKey) -> None:
        existing = self.keys.get(key.kid)
        if existing is not None and (existing.alg, existing.public_key) != (key.alg, key.public_key):
            raise ConfigError(f"kid {key.kid!r} already bound to a different key")
        self.keys[key.kid] = key

    def get(self, kid: str) -> TrustedKey:
        try:
            return self.keys[kid]
        except KeyError:
            raise UnknownKid(kid) from None

    def __contains__(self, kid: str) -> bool:
        return kid in self.keys

    def to_dict(self) -> dict:
        return {kid: k.to_dict() for kid, k in sorted(self.keys.items())}

    @classmethod
    def from_dict(cls, data: dict) -> "TrustStore":
        store = cls()
        for kid, v in data.items():
            if v.get("alg") not in SUPPORTED_ALGS:
                raise ConfigError(f"trust store: bad alg for {kid!r}")
            store.add(
                TrustedKey(
                    kid=kid,
                    alg=v["alg"],
                    public_key=bytes.fromhex(v["public_key"]),
                    not_before=int(v.get("not_before", 0)),
                    not_after=None if v.get("not_after") is None else int(v["not_after"]),
                )
            )
        return store

    @classmethod
    def load(cls, path) -> "TrustStore":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"cannot load trust store {path}: {exc}") from exc
