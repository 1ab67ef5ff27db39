"""Independent reference implementations, written without the package cores."""

import hashlib
import math

from scipy import stats as sps

from evgate.canonical import canonical_bytes


def holm_oracle(p, alpha):
    """Step-down Holm, one hypothesis at a time."""
    m = len(p)
    order = sorted(range(m), key=lambda i: (p[i], i))
    out = set()
    for rank, i in enumerate(order):
        if p[i] <= alpha / (m - rank):
            out.add(i)
        else:
            break
    return out


def step_up_oracle(p, q, c=1.0):
    """Step-up BH (c=1) or BY (c = harmonic(m))."""
    m = len(p)
    order = sorted(range(m), key=lambda i: (p[i], i))
    k = 0
    for rank in range(m, 0, -1):
        if p[order[rank - 1]] <= rank * q / (m * c):
            k = rank
            break
    return set(order[:k])


def bonferroni_oracle(p, alpha):
    return {i for i, x in enumerate(p) if x <= alpha / len(p)}


def harmonic(m):
    return sum(1.0 / i for i in range(1, m + 1))


def fleiss_oracle(p0, rel, alpha, power):
    """Fleiss continuity-corrected n per arm for a two-sided two-proportion test."""
    p1 = p0 * (1 - rel)
    za, zb = sps.norm.ppf(1 - alpha / 2), sps.norm.ppf(power)
    pb = (p0 + p1) / 2
    d = abs(p0 - p1)
    n = (za * math.sqrt(2 * pb * (1 - pb)) + zb * math.sqrt(p0 * (1 - p0) + p1 * (1 - p1))) ** 2 / d**2
    return math.ceil(n / 4 * (1 + math.sqrt(1 + 4 / (n * d))) ** 2)


# sparse Merkle tree by plain recursion over the 256-bit keyspace


def h(b):
    return hashlib.sha256(b).digest()


EMPTY = [b"\x00" * 32]
for _ in range(256):
    EMPTY.append(h(b"\x01" + EMPTY[-1] + EMPTY[-1]))


def oracle_root(entries):
    leaves = {int.from_bytes(h(e.doc_id.encode()), "big"): h(b"\x00" + canonical_bytes(e.to_dict())) for e in entries}

    def node(height, items):
        if not items:
            return EMPTY[height]
        if height == 0:
            return items[0][1]
        bit = height - 1
        left = [kv for kv in items if not (kv[0] >> bit) & 1]
        right = [kv for kv in items if (kv[0] >> bit) & 1]
        return h(b"\x01" + node(height - 1, left) + node(height - 1, right))

    return node(256, sorted(leaves.items()))
