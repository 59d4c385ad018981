"""Hierarchical seed derivation: one root seed, split by named keys."""
import zlib

import numpy as np


def _key(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k) & 0xFFFFFFFF


def derive_seed(root, *keys):
    """Deterministic 32-bit child seed of ``root`` along the path ``keys``."""
    ss = np.random.SeedSequence(entropy=_key(root), spawn_key=tuple(_key(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def rng(root, *keys):
    return np.random.default_rng(derive_seed(root, *keys))
