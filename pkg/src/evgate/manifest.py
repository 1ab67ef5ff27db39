"""Shard manifests committed to a fixed-depth sparse Merkle tree.

Tree layout
-----------
* 256-bit keyspace, key = SHA-256(doc_id). Height 0 holds leaves, height 256
  is the root; a node at height ``h`` is addressed by ``key >> h``.
* Leaf digest = SHA-256(0x00 || canonical JSON of the entry).
  Node digest = SHA-256(0x01 || left || right).
* Empty leaf = 32 zero bytes; empty subtree digests are precomputed per level.

Only "maximal" nodes are stored: nodes with two or more leaves below them,
and the topmost node of each single-leaf subtree. Everything else is either
an empty default or recomputable from one leaf.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .canonical import canonical_bytes
from .clock import SystemClock
from .errors import (
    ConfigError,
    DuplicateDocId,
    EmptyKeySet,
    LeafCapExceeded,
    MalformedEntry,
    MalformedProof,
    SignerRevoked,
    SubstrateWriteFailure,
)
from .keys import KeyHandle, TrustStore

log = logging.getLogger(__name__)

DEPTH = 256
MAX_LEAVES = 65_536
SELECTOR_CAP = 128
PROOF_VERSION = 1
KIND_INCLUSION = 0
KIND_NON_INCLUSION = 1
KIND_MULTI = 2
# one-key multiproofs drop the count and kinds bytes
KIND_MULTI_ONE_INCLUSION = 3
KIND_MULTI_ONE_NON_INCLUSION = 4
MULTI_KINDS = (KIND_MULTI, KIND_MULTI_ONE_INCLUSION, KIND_MULTI_ONE_NON_INCLUSION)

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"
EMPTY = bytes(32)

_sha = hashlib.sha256


def _node(left: bytes, right: bytes) -> bytes:
    return _sha(NODE_PREFIX + left + right).digest()


DEFAULTS: list[bytes] = [EMPTY]
for _ in range(DEPTH):
    DEFAULTS.append(_node(DEFAULTS[-1], DEFAULTS[-1]))


def key_for(doc_id: str) -> bytes:
    return _sha(doc_id.encode("utf-8")).digest()


def _k(key: bytes) -> int:
    return int.from_bytes(key, "big")


def _chain(key: int, value: bytes, start: int, stop: int) -> bytes:
    """Hash ``value`` from height ``start`` up to ``stop`` with empty siblings."""
    d = DEFAULTS
    sha = _sha
    for i in range(start, stop):
        if (key >> i) & 1:
            value = sha(NODE_PREFIX + d[i] + value).digest()
        else:
            value = sha(NODE_PREFIX + value + d[i]).digest()
    return value


# --------------------------------------------------------------------------
# entries and manifests


@dataclass(frozen=True)
class License:
    terms_id: str
    ttl_expiry: int | None = None

    def to_dict(self) -> dict:
        return {"terms_id": self.terms_id, "ttl_expiry": self.ttl_expiry}

    @classmethod
    def from_dict(cls, d: dict) -> "License":
        return cls(terms_id=d["terms_id"], ttl_expiry=d.get("ttl_expiry"))


@dataclass(frozen=True)
class DocumentEntry:
    doc_id: str
    version_hash: bytes
    license: License
    anchors: tuple[str, ...] = ()
    trust_tier: int = 0
    issuer: str = ""
    author: str = ""

    def validate(self) -> None:
        if not isinstance(self.doc_id, str) or not self.doc_id:
            raise MalformedEntry("doc_id must be a non-empty string")
        if not isinstance(self.version_hash, bytes) or len(self.version_hash) != 32:
            raise MalformedEntry(f"{self.doc_id}: version_hash must be 32 bytes")
        for sel in self.anchors:
            if len(sel.encode("utf-8")) > SELECTOR_CAP:
                raise MalformedEntry(f"{self.doc_id}: selector exceeds {SELECTOR_CAP} bytes")
        if not isinstance(self.trust_tier, int) or self.trust_tier < 0:
            raise MalformedEntry(f"{self.doc_id}: trust_tier must be a non-negative int")

    @property
    def key(self) -> bytes:
        return key_for(self.doc_id)

    def to_dict(self) -> dict:
        return {
            "anchors": list(self.anchors),
            "author": self.author,
            "doc_id": self.doc_id,
            "issuer": self.issuer,
            "license": self.license.to_dict(),
            "trust_tier": self.trust_tier,
            "version_hash": self.version_hash.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DocumentEntry":
        try:
            return cls(
                doc_id=d["doc_id"],
                version_hash=bytes.fromhex(d["version_hash"]),
                license=License.from_dict(d["license"]),
                anchors=tuple(d.get("anchors", ())),
                trust_tier=int(d.get("trust_tier", 0)),
                issuer=d.get("issuer", ""),
                author=d.get("author", ""),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise MalformedEntry(f"bad entry: {exc}") from exc

    def leaf_hash(self) -> bytes:
        return _sha(LEAF_PREFIX + canonical_bytes(self.to_dict())).digest()


@dataclass(frozen=True)
class ShardId:
    issuer: str
    corpus: str
    jurisdiction: str
    window_start: str | None = None
    window_end: str | None = None

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus,
            "issuer": self.issuer,
            "jurisdiction": self.jurisdiction,
            "window_end": self.window_end,
            "window_start": self.window_start,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShardId":
        return cls(
            issuer=d["issuer"],
            corpus=d["corpus"],
            jurisdiction=d["jurisdiction"],
            window_start=d.get("window_start"),
            window_end=d.get("window_end"),
        )

    @property
    def label(self) -> str:
        return "/".join(
            [self.issuer, self.corpus, self.jurisdiction, f"{self.window_start}..{self.window_end}"]
        )


class _Tree:
    """Node index for one sealed manifest."""

    def __init__(self, keyed: Sequence[tuple[int, bytes]]):
        self.keys = [k for k, _ in keyed]
        self.leaves = dict(keyed)
        self.multi: dict[tuple[int, int], bytes] = {}
        self.single: dict[tuple[int, int], tuple[int, bytes]] = {}
        self.root = self._build(DEPTH, 0, len(self.keys))

    def _build(self, h: int, lo: int, hi: int) -> bytes:
        if hi == lo:
            return DEFAULTS[h]
        if hi - lo == 1:
            k = self.keys[lo]
            value = _chain(k, self.leaves[k], 0, h)
            self.single[(h, k >> h)] = (k, value)
            return value
        boundary = ((self.keys[lo] >> h) << h) | (1 << (h - 1))
        mid = bisect.bisect_left(self.keys, boundary, lo, hi)
        value = _node(self._build(h - 1, lo, mid), self._build(h - 1, mid, hi))
        self.multi[(h, self.keys[lo] >> h)] = value
        return value

    def _child(self, h: int, prefix: int):
        if (h, prefix) in self.multi:
            return "multi", self.multi[(h, prefix)], None
        if (h, prefix) in self.single:
            k, v = self.single[(h, prefix)]
            return "single", v, k
        return "empty", DEFAULTS[h], None

    def siblings(self, key: int) -> dict[int, bytes]:
        """Non-default siblings along ``key``'s path, indexed by height."""
        out: dict[int, bytes] = {}
        if not self.keys:
            return out
        kind, _, other = self._child(DEPTH, 0)
        h = DEPTH
        while kind == "multi":
            mine = key >> (h - 1)
            s_kind, s_val, _ = self._child(h - 1, mine ^ 1)
            if s_kind != "empty":
                out[h - 1] = s_val
            kind, _, other = self._child(h - 1, mine)
            h -= 1
        if kind == "single" and other != key:
            split = (key ^ other).bit_length()  # nodes part ways below this height
            out[split - 1] = _chain(other, self.leaves[other], 0, split - 1)
        return out


@dataclass(frozen=True)
class ShardManifest:
    shard: ShardId
    entries: tuple[DocumentEntry, ...]
    root: bytes
    superseded_roots: tuple[tuple[str, int], ...] = ()
    sealed_at: int = 0
    _tree: _Tree | None = field(default=None, repr=False, compare=False)

    @property
    def leaf_count(self) -> int:
        return len(self.entries)

    @property
    def sealed(self) -> bool:
        return self._tree is not None

    def entry(self, doc_id: str) -> DocumentEntry | None:
        k = _k(key_for(doc_id))
        for e in self.entries:
            if _k(e.key) == k:
                return e
        return None

    def to_dict(self) -> dict:
        return {
            "entries": [e.to_dict() for e in self.entries],
            "leaf_count": self.leaf_count,
            "root": self.root.hex(),
            "sealed_at": self.sealed_at,
            "shard": self.shard.to_dict(),
            "superseded_roots": [{"root": r, "sealed_at": t} for r, t in self.superseded_roots],
            "version": 1,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShardManifest":
        """Load and re-derive the root; a mismatching root is rejected."""
        try:
            entries = [DocumentEntry.from_dict(e) for e in d["entries"]]
            shard = ShardId.from_dict(d["shard"])
            superseded = tuple((s["root"], int(s["sealed_at"])) for s in d.get("superseded_roots", []))
            claimed = bytes.fromhex(d["root"])
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"bad manifest: {exc}") from exc
        m = build_manifest(entries, shard, sealed_at=int(d.get("sealed_at", 0)))
        if m.root != claimed:
            raise ConfigError("manifest root does not match its entries")
        return ShardManifest(m.shard, m.entries, m.root, superseded, m.sealed_at, m._tree)

    def save(self, path) -> None:
        from .canonical import dump_json

        dump_json(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "ShardManifest":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
        return cls.from_dict(data)


def build_manifest(
    entries: Iterable[DocumentEntry], shard: ShardId, *, sealed_at: int = 0
) -> ShardManifest:
    entries = list(entries)
    if not entries:
        raise MalformedEntry("manifest needs at least one entry")
    if len(entries) > MAX_LEAVES:
        raise LeafCapExceeded(f"{len(entries)} entries exceed cap of {MAX_LEAVES}")
    seen: set[str] = set()
    for e in entries:
        e.validate()
        if e.doc_id in seen:
            raise DuplicateDocId(e.doc_id)
        seen.add(e.doc_id)
    keyed = sorted(((_k(e.key), e) for e in entries), key=lambda t: t[0])
    tree = _Tree([(k, e.leaf_hash()) for k, e in keyed])
    return ShardManifest(
        shard=shard,
        entries=tuple(e for _, e in keyed),
        root=tree.root,
        sealed_at=sealed_at,
        _tree=tree,
    )


def update_manifest(
    manifest: ShardManifest, entries: Iterable[DocumentEntry], *, sealed_at: int
) -> ShardManifest:
    """Seal a new manifest for the shard and archive the old root."""
    new = build_manifest(entries, manifest.shard, sealed_at=sealed_at)
    archived = manifest.superseded_roots + ((manifest.root.hex(), manifest.sealed_at),)
    return ShardManifest(new.shard, new.entries, new.root, archived, sealed_at, new._tree)


# --------------------------------------------------------------------------
# proofs


def _bitmap(heights: Iterable[int], nbits: int) -> bytes:
    out = bytearray((nbits + 7) // 8)
    for h in heights:
        out[h // 8] |= 1 << (h % 8)
    return bytes(out)


def _bit(bitmap: bytes, i: int) -> bool:
    return bool(bitmap[i // 8] >> (i % 8) & 1)


@dataclass(frozen=True)
class SmtProof:
    key: bytes
    inclusion: bool
    leaf_hash: bytes  # EMPTY for non-inclusion
    siblings: tuple[tuple[int, bytes], ...]  # (height, digest), ascending height

    @property
    def kind(self) -> str:
        return "inclusion" if self.inclusion else "non-inclusion"

    def to_bytes(self) -> bytes:
        parts = [
            bytes([PROOF_VERSION, KIND_INCLUSION if self.inclusion else KIND_NON_INCLUSION]),
            self.key,
        ]
        if self.inclusion:
            parts.append(self.leaf_hash)
        parts.append(_bitmap((h for h, _ in self.siblings), DEPTH))
        parts.extend(d for _, d in self.siblings)
        return b"".join(parts)

    @property
    def size_bytes(self) -> int:
        return len(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "SmtProof":
        if len(data) < 2 or data[0] != PROOF_VERSION or data[1] not in (0, 1):
            raise MalformedProof("bad proof header")
        inclusion = data[1] == KIND_INCLUSION
        pos = 2
        need = 32 + (32 if inclusion else 0) + 32
        if len(data) < pos + need:
            raise MalformedProof("truncated proof")
        key = data[pos : pos + 32]
        pos += 32
        leaf = EMPTY
        if inclusion:
            leaf = data[pos : pos + 32]
            pos += 32
        bitmap = data[pos : pos + 32]
        pos += 32
        heights = [h for h in range(DEPTH) if _bit(bitmap, h)]
        if len(data) != pos + 32 * len(heights):
            raise MalformedProof("sibling count does not match bitmap")
        sibs = tuple((h, data[pos + 32 * i : pos + 32 * (i + 1)]) for i, h in enumerate(heights))
        return cls(key, inclusion, leaf, sibs)

    def to_json_dict(self) -> dict:
        return {
            "key": self.key.hex(),
            "kind": self.kind,
            "leaf_hash": self.leaf_hash.hex() if self.inclusion else None,
            "path": [{"level": h, "digest": d.hex()} for h, d in self.siblings],
            "size_bytes": self.size_bytes,
        }

    def matches_entry(self, entry: DocumentEntry) -> bool:
        return self.inclusion and entry.key == self.key and entry.leaf_hash() == self.leaf_hash

    def compute_root(self) -> bytes:
        if len(self.key) != 32 or len(self.leaf_hash) != 32:
            raise MalformedProof("key and leaf must be 32 bytes")
        if not self.inclusion and self.leaf_hash != EMPTY:
            raise MalformedProof("non-inclusion proof must carry the empty leaf")
        sib = dict(self.siblings)
        if len(sib) != len(self.siblings) or any(not 0 <= h < DEPTH or len(d) != 32 for h, d in self.siblings):
            raise MalformedProof("bad sibling path")
        k = _k(self.key)
        v = self.leaf_hash
        for i in range(DEPTH):
            s = sib.get(i, DEFAULTS[i])
            v = _node(s, v) if (k >> i) & 1 else _node(v, s)
        return v


def _varint(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _read_varint(data: bytes, pos: int) -> tuple[int, int]:
    n = shift = 0
    while True:
        if pos >= len(data):
            raise MalformedProof("truncated varint")
        b = data[pos]
        pos += 1
        n |= (b & 0x7F) << shift
        if not b & 0x80:
            return n, pos
        shift += 7
        if shift > 28:
            raise MalformedProof("varint too long")


def _slots(keys: Sequence[int]):
    """Deterministic order in which a multiproof consumes sibling slots.

    Yields ``(height, prefix)`` for every node whose sibling is not itself
    derivable from the proven keys.
    """
    known = sorted(set(keys))
    for h in range(DEPTH):
        kset = set(known)
        for p in known:
            if p ^ 1 not in kset:
                yield h, p
        known = sorted({p >> 1 for p in known})


@dataclass(frozen=True)
class Multiproof:
    keys: tuple[bytes, ...]  # ascending
    leaves: tuple[bytes, ...]  # per key; EMPTY marks non-inclusion
    present: bytes  # one bit per slot
    shared_nodes: tuple[bytes, ...]

    def to_bytes(self) -> bytes:
        if len(self.keys) == 1:
            kind = KIND_MULTI_ONE_NON_INCLUSION if self.leaves[0] == EMPTY else KIND_MULTI_ONE_INCLUSION
            parts = [bytes([PROOF_VERSION, kind])]
        else:
            kinds = _bitmap((i for i, lf in enumerate(self.leaves) if lf == EMPTY), len(self.keys))
            parts = [bytes([PROOF_VERSION, KIND_MULTI]), _varint(len(self.keys)), kinds]
        parts.extend(self.keys)
        parts.extend(lf for lf in self.leaves if lf != EMPTY)
        parts.append(self.present)
        parts.extend(self.shared_nodes)
        return b"".join(parts)

    @property
    def size_bytes(self) -> int:
        return len(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Multiproof":
        if len(data) < 3 or data[0] != PROOF_VERSION or data[1] not in MULTI_KINDS:
            raise MalformedProof("bad multiproof header")
        if data[1] == KIND_MULTI:
            count, pos = _read_varint(data, 2)
            if count < 2:
                raise MalformedProof("multiproof count below 2 needs the one-key form")
            nk = (count + 7) // 8
            kinds = data[pos : pos + nk]
            pos += nk
        else:
            count, pos = 1, 2
            kinds = b"\x01" if data[1] == KIND_MULTI_ONE_NON_INCLUSION else b"\x00"
        if len(data) < pos + 32 * count:
            raise MalformedProof("truncated keys")
        keys = tuple(data[pos + 32 * i : pos + 32 * (i + 1)] for i in range(count))
        pos += 32 * count
        leaves = []
        for i in range(count):
            if _bit(kinds, i):
                leaves.append(EMPTY)
            else:
                if len(data) < pos + 32:
                    raise MalformedProof("truncated leaves")
                leaves.append(data[pos : pos + 32])
                pos += 32
        nslots = sum(1 for _ in _slots([_k(k) for k in keys]))
        nb = (nslots + 7) // 8
        if len(data) < pos + nb:
            raise MalformedProof("truncated slot bitmap")
        present = data[pos : pos + nb]
        pos += nb
        npresent = sum(_bit(present, i) for i in range(nslots))
        if len(data) != pos + 32 * npresent:
            raise MalformedProof("shared node count does not match bitmap")
        nodes = tuple(data[pos + 32 * i : pos + 32 * (i + 1)] for i in range(npresent))
        return cls(keys, tuple(leaves), present, nodes)

    def to_json_dict(self) -> dict:
        return {
            "keys": [k.hex() for k in self.keys],
            "kind": "multiproof",
            "leaves": [None if lf == EMPTY else lf.hex() for lf in self.leaves],
            "shared_nodes": [n.hex() for n in self.shared_nodes],
            "size_bytes": self.size_bytes,
        }

    def compute_root(self) -> bytes:
        if not self.keys:
            raise MalformedProof("empty multiproof")
        if len(self.leaves) != len(self.keys) or list(self.keys) != sorted(set(self.keys)):
            raise MalformedProof("keys must be unique, sorted and paired with leaves")
        if any(len(k) != 32 for k in self.keys) or any(len(lf) != 32 for lf in self.leaves):
            raise MalformedProof("keys and leaves must be 32 bytes")
        level = {_k(k): lf for k, lf in zip(self.keys, self.leaves)}
        nodes = iter(self.shared_nodes)
        slot = 0
        for h in range(DEPTH):
            nxt: dict[int, bytes] = {}
            for p in sorted(level):
                parent = p >> 1
                if parent in nxt:
                    continue
                if p ^ 1 in level:
                    sib = level[p ^ 1]
                else:
                    if slot // 8 >= len(self.present):
                        raise MalformedProof("slot bitmap too short")
                    if _bit(self.present, slot):
                        sib = next(nodes, None)
                        if sib is None:
                            raise MalformedProof("missing shared node")
                    else:
                        sib = DEFAULTS[h]
                    slot += 1
                v = level[p]
                nxt[parent] = _node(sib, v) if p & 1 else _node(v, sib)
            level = nxt
        if next(nodes, None) is not None or (slot + 7) // 8 != len(self.present):
            raise MalformedProof("unused proof material")
        return level[0]


def prove(manifest: ShardManifest, doc_id: str) -> SmtProof:
    tree = manifest._tree
    if tree is None:
        raise ConfigError("manifest is not sealed")
    key = key_for(doc_id)
    k = _k(key)
    leaf = tree.leaves.get(k)
    sibs = tree.siblings(k)
    return SmtProof(
        key=key,
        inclusion=leaf is not None,
        leaf_hash=leaf if leaf is not None else EMPTY,
        siblings=tuple(sorted(sibs.items())),
    )


def prove_multi(manifest: ShardManifest, doc_ids: Iterable[str]) -> Multiproof:
    tree = manifest._tree
    if tree is None:
        raise ConfigError("manifest is not sealed")
    keys = sorted({_k(key_for(d)) for d in doc_ids})
    if not keys:
        raise EmptyKeySet("prove_multi needs at least one doc_id")
    # every slot sibling is also a sibling on the single path of the key below it
    per_key = {k: tree.siblings(k) for k in keys}
    owner: dict[tuple[int, int], int] = {}
    for k in keys:
        for h in range(DEPTH):
            owner.setdefault((h, k >> h), k)
    present = []
    nodes = []
    for h, p in _slots(keys):
        sib = per_key[owner[(h, p)]].get(h)
        present.append(sib is not None)
        if sib is not None:
            nodes.append(sib)
    bitmap = _bitmap((i for i, b in enumerate(present) if b), len(present))
    return Multiproof(
        keys=tuple(k.to_bytes(32, "big") for k in keys),
        leaves=tuple(tree.leaves.get(k, EMPTY) for k in keys),
        present=bitmap,
        shared_nodes=tuple(nodes),
    )


@dataclass(frozen=True)
class ProofBudget:
    timeout_ms: int = 300
    max_size_bytes: int = 64 * 1024


@dataclass(frozen=True)
class ProofCheck:
    valid: bool
    size_bytes: int
    elapsed_ms: int
    timed_out: bool
    oversize: bool = False


def verify_proof(
    root: bytes,
    proof: SmtProof | Multiproof | bytes,
    budget: ProofBudget | None = None,
    clock=None,
) -> ProofCheck:
    """Recompute the root from ``proof`` and compare.

    Structural problems raise :class:`MalformedProof`; a wrong root is just
    ``valid=False``. Elapsed time is read from ``clock`` so delays can be
    injected in tests.
    """
    budget = budget or ProofBudget()
    clock = clock or SystemClock()
    start = clock.now_ms()
    if isinstance(proof, (bytes, bytearray)):
        data = bytes(proof)
        if len(data) > 1 and data[1] in MULTI_KINDS:
            proof = Multiproof.from_bytes(data)
        else:
            proof = SmtProof.from_bytes(data)
    if not isinstance(proof, (SmtProof, Multiproof)):
        raise MalformedProof(f"not a proof: {type(proof).__name__}")
    valid = proof.compute_root() == root
    elapsed = clock.now_ms() - start
    size = proof.size_bytes
    return ProofCheck(
        valid=valid,
        size_bytes=size,
        elapsed_ms=elapsed,
        timed_out=elapsed > budget.timeout_ms,
        oversize=size > budget.max_size_bytes,
    )


# --------------------------------------------------------------------------
# anchoring


@dataclass(frozen=True)
class AnchorRecord:
    root: bytes
    anchored_at: int
    substrate_id: str
    seq: int
    kid: str
    alg: str
    signature: bytes

    def signed_bytes(self) -> bytes:
        return anchor_payload(self.root, self.anchored_at, self.substrate_id)

    def to_dict(self) -> dict:
        return {
            "alg": self.alg,
            "anchored_at": self.anchored_at,
            "kid": self.kid,
            "root": self.root.hex(),
            "seq": self.seq,
            "signature": self.signature.hex(),
            "substrate_id": self.substrate_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorRecord":
        return cls(
            root=bytes.fromhex(d["root"]),
            anchored_at=int(d["anchored_at"]),
            substrate_id=d["substrate_id"],
            seq=int(d["seq"]),
            kid=d["kid"],
            alg=d["alg"],
            signature=bytes.fromhex(d["signature"]),
        )

    def verify(self, trust_store: TrustStore) -> bool:
        if self.kid not in trust_store:
            return False
        key = trust_store.get(self.kid)
        return key.alg == self.alg and key.verify(self.signed_bytes(), self.signature)


def anchor_payload(root: bytes, anchored_at: int, substrate_id: str) -> bytes:
    return canonical_bytes(
        {"anchored_at": anchored_at, "root": root.hex(), "substrate_id": substrate_id}
    )


class FileAnchorSink:
    """Append-only JSON-lines file standing in for a public timestamp log."""

    def __init__(self, path, substrate_id: str = "local-file"):
        self.path = Path(path)
        self.substrate_id = substrate_id

    def records(self) -> list[AnchorRecord]:
        if not self.path.exists():
            return []
        return [
            AnchorRecord.from_dict(json.loads(line))
            for line in self.path.read_text().splitlines()
            if line.strip()
        ]

    def next_seq(self) -> int:
        recs = self.records()
        return recs[-1].seq + 1 if recs else 1

    def append(self, record: AnchorRecord) -> None:
        line = canonical_bytes(record.to_dict()) + b"\n"
        try:
            with open(self.path, "ab") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            raise SubstrateWriteFailure(str(exc)) from exc


def anchor_root(
    manifest: ShardManifest,
    signer: KeyHandle,
    substrate: FileAnchorSink,
    now: int,
    is_revoked: Callable[[str, int], bool] | None = None,
) -> AnchorRecord:
    if not manifest.sealed:
        raise ConfigError("manifest is not sealed")
    if is_revoked is not None and is_revoked(signer.kid, now):
        raise SignerRevoked(signer.kid)
    try:
        seq = substrate.next_seq()
    except (OSError, ValueError) as exc:
        raise SubstrateWriteFailure(str(exc)) from exc
    payload = anchor_payload(manifest.root, now, substrate.substrate_id)
    record = AnchorRecord(
        root=manifest.root,
        anchored_at=now,
        substrate_id=substrate.substrate_id,
        seq=seq,
        kid=signer.kid,
        alg=signer.alg,
        signature=signer.sign(payload),
    )
    substrate.append(record)
    log.info("anchored root %s seq=%d", manifest.root.hex()[:16], seq)
    return record


def load_entries_jsonl(path) -> list[DocumentEntry]:
    out = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    for i, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            out.append(DocumentEntry.from_dict(json.loads(line)))
        except ValueError as exc:
            raise ConfigError(f"{path}:{i}: {exc}") from exc
    return out


__all__ = [
    "AnchorRecord",
    "DocumentEntry",
    "FileAnchorSink",
    "License",
    "Multiproof",
    "ProofBudget",
    "ProofCheck",
    "ShardId",
    "ShardManifest",
    "SmtProof",
    "anchor_root",
    "build_manifest",
    "key_for",
    "prove",
    "prove_multi",
    "update_manifest",
    "verify_proof",
]
