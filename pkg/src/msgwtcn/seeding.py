"""Seed splitting.

Every random stream is derived from one top-level seed plus a path of keys,
e.g. ``derive_seed(7, "train", "shuffle")``. Integer keys are used as is,
string keys through their CRC-32, and the tuple is fed to numpy's
``SeedSequence``, so streams for different keys are independent and stable
across runs and platforms.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def derive_seed(seed: int, *keys) -> int:
    ss = np.random.SeedSequence([int(seed), *(_key(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def derive_rng(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *keys)))
