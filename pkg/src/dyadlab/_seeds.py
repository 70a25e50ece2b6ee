"""Deterministic seed derivation.

A single root seed reproduces every random choice in the package: module- and
task-level seeds are derived by hashing a text label together with the root,
so independent streams never collide and never depend on call order.
"""
from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "rng_for"]


def derive_seed(root: int, label: str) -> int:
    """Return a 63-bit seed derived from ``root`` and a text ``label``."""
    digest = hashlib.sha256(f"{root}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def rng_for(root: int, label: str) -> np.random.Generator:
    """A numpy Generator seeded by :func:`derive_seed`."""
    return np.random.default_rng(derive_seed(root, label))
