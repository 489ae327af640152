"""Deterministic, splittable random streams.

Every stochastic component of the library (weight init, dropout, batch
shuffling, the scene simulator) draws from an explicit ``RngStream``.
Streams are backed by numpy's Philox4x64-10 counter-based generator;
``split(name)`` derives an independent child stream whose 128-bit key is
BLAKE2b(parent_key_hex + "/" + name), so a stream's output depends only on
the root seed and its derivation path — never on draw order elsewhere.
"""

from __future__ import annotations

import hashlib

import numpy as np


class RngStream:
    def __init__(self, seed=0, _key=None, path=""):
        if _key is None:
            _key = int(seed) & ((1 << 128) - 1)
        self.key = _key
        self.path = path
        self._gen = np.random.Generator(np.random.Philox(key=self.key))

    def split(self, name) -> "RngStream":
        """Derive an independent child stream addressed by ``name``."""
        token = f"{self.key:032x}/{name}".encode()
        child_key = int.from_bytes(hashlib.blake2b(token, digest_size=16).digest(), "little")
        child_path = f"{self.path}/{name}" if self.path else str(name)
        return RngStream(_key=child_key, path=child_path)

    def normal(self, size, mean=0.0, std=1.0, dtype=np.float32):
        return self._gen.normal(mean, std, size=size).astype(dtype)

    def uniform(self, size, low=0.0, high=1.0, dtype=np.float64):
        return self._gen.uniform(low, high, size=size).astype(dtype)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RngStream(path={self.path!r})"
