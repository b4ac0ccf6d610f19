"""Seed substream derivation.

All randomness in the pipeline flows from one root seed through named
substreams so that independent stages can be re-run without disturbing
each other's random state.
"""

from __future__ import annotations

import hashlib

import numpy as np

SUBSTREAMS = (
    "corpus",
    "benchmark",
    "mask",
    "mix",
    "probe",
    "codec",
    "editor",
    "diffusion-t",
    "noise",
    "sampler",
)


def derive_seed(root_seed: int, name: str) -> int:
    """Stable 63-bit seed for the named substream."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def substream(root_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root_seed, name))
