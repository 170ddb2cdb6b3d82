"""Deterministic, labelled random streams.

Each stream is a counter-based Philox generator keyed by a 64-bit hash of
``(master_seed, label)``, so two streams with different labels never share
state and the same pair always reproduces the same draws.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from ._container import hash64


def stream_key(master_seed: int, label: bytes) -> int:
    return hash64(struct.pack("<Q", master_seed & 0xFFFFFFFFFFFFFFFF), label)


@dataclass
class RngStream:
    master_seed: int
    label: bytes = b""
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if isinstance(self.label, str):
            self.label = self.label.encode()
        key = stream_key(self.master_seed, self.label)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, label) -> "RngStream":
        """Independent stream derived by extending this stream's label."""
        if isinstance(label, str):
            label = label.encode()
        return RngStream(self.master_seed, self.label + b"/" + label)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def standard_normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, x):
        return self._gen.permutation(x)

    def bytes(self, n: int) -> bytes:
        return self._gen.bytes(n)
