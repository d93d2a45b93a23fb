"""Seed derivation: every component RNG comes from the one experiment seed.

``derive_seed(seed, "peft")`` hashes the tag names with CRC32 and feeds
``[seed, *crc32s]`` to ``numpy.random.SeedSequence``; the first 32-bit word of
the generated state is the component seed.  Tags in use: ``"backbone"``,
``"peft"``, ``"featurizer"``, ``"tasks"/<name>/<split>``, ``"shuffle"``.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(seed: int, *tags) -> int:
    entropy = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(t).encode("utf-8")) for t in tags]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def rng_for(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *tags))
