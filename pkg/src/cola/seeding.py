"""Deterministic seed derivation.

Every random draw in the toolkit flows from one user-supplied 64-bit seed.
Sub-seeds for scenes, scans, phases and layers are derived by hashing the
parent seed together with string tags, so results are reproducible across
processes and platforms (Python's builtin ``hash`` is salted and never used).
"""

import hashlib

import numpy as np


def derive_seed(*parts: object) -> int:
    """Hash an arbitrary tuple of parts into a 64-bit seed."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_from(*parts: object) -> np.random.Generator:
    """PCG64 generator seeded from the derived seed of ``parts``."""
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
