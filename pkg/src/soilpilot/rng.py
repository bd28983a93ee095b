"""Seed management.

All randomness in the pipeline flows from one root seed through named
sub-streams, so a single config value pins isolation-forest subsampling,
MLP initialisation and MI jitter at once. Stream names are hashed with
SHA-256 so the mapping is stable across platforms and Python versions.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream_seed(root_seed: int, name: str) -> np.random.SeedSequence:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.SeedSequence([int(root_seed), key])


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Generator for the named sub-stream of the root seed (e.g. ``"iforest"``)."""
    return np.random.default_rng(substream_seed(root_seed, name))
