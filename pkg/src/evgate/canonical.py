"""Canonical JSON encoding and hashing helpers.

Every signed or hashed artifact in the package goes through
:func:`canonical_bytes`: keys sorted lexicographically, no insignificant
whitespace, UTF-8, and no NaN/Infinity.
"""

from __future__ import annotations

import hashlib
import json
import math
from fractions import Fraction
from typing import Any

from .errors import NonCanonicalInput


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _check(obj: Any, path: str = "$") -> None:
    if obj is None or isinstance(obj, (bool, str, int)):
        return
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise NonCanonicalInput(f"non-finite float at {path}")
        return
    if isinstance(obj, dict):
        for k, v in obj.items():
            if not isinstance(k, str):
                raise NonCanonicalInput(f"non-string key {k!r} at {path}")
            _check(v, f"{path}.{k}")
        return
    if isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _check(v, f"{path}[{i}]")
        return
    raise NonCanonicalInput(f"unsupported type {type(obj).__name__} at {path}")


def canonical_bytes(obj: Any) -> bytes:
    """Deterministic byte encoding of a JSON-compatible value."""
    _check(obj)
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def canonical_hash(obj: Any) -> bytes:
    return sha256(canonical_bytes(obj))


def frac_str(x: Fraction) -> str:
    """Exact rational rendering used in receipts ("2/3", "1")."""
    return str(Fraction(x))


def parse_frac(s: str | int | float) -> Fraction:
    if isinstance(s, float):
        return Fraction(str(s))
    return Fraction(s)


def dump_json(obj: Any, path, *, pretty: bool = False) -> None:
    """Write JSON atomically (temp file + rename)."""
    import os
    import tempfile
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if pretty:
        data = json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
        payload = data.encode("utf-8")
    else:
        payload = canonical_bytes(obj) + b"\n"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
