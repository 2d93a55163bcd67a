"""Deterministic expansion of one top-level seed into per-component seeds.

``component_seed(seed, name)`` is the first 8 bytes (little endian) of
``sha256(f"opdkit:{seed}:{name}")``. Component names are stable strings such
as ``"sampler"``, ``"judge"`` or ``"perturb:<frame ref>"``, so adding a
component never shifts the seeds of the others.
"""

from __future__ import annotations

import hashlib


def component_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"opdkit:{int(seed)}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def hash_bit(seed: int, key: str) -> int:
    """A reproducible fair coin flip keyed by ``(seed, key)``."""
    return hashlib.sha256(f"opdkit-bit:{int(seed)}:{key}".encode("utf-8")).digest()[0] & 1
