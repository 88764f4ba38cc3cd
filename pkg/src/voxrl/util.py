"""Seeding and hashing helpers shared across stages."""

from __future__ import annotations

import hashlib
import json

_MASK63 = (1 << 63) - 1


def derive_seed(*parts) -> int:
    """Derive a deterministic 63-bit seed from arbitrary labelled parts.

    Every RNG stream in the project (per-volume, per-trajectory, per-stage)
    comes from one master seed through this keyed hash, so parallel and
    serial execution orders produce identical results.
    """
    h = hashlib.blake2b(digest_size=8, key=b"voxrl")
    for part in parts:
        h.update(repr(part).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little") & _MASK63


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    """Stable 12-hex digest of a JSON-serializable config dict."""
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:12]
