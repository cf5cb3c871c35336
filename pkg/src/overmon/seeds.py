"""Deterministic seed derivation for independent random streams.

Every random decision in a run flows from one master seed. Sub-streams
(per link, per node, per trial) get their own seed derived by hashing
``master:label``, so adding or reordering streams never perturbs the
others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, label: str) -> int:
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def derive_rng(master: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, label))
