"""Seeded random streams.

Every stream wraps numpy's Philox-4x64 counter-based generator keyed by a
``SeedSequence``. Child streams are derived with ``SeedSequence.spawn`` so
parallel consumers never share counters. Normal draws use the Box-Muller
transform on pairs of uniforms, not numpy's ziggurat, so the algorithm is
fully documented here.

``keyed(*key)`` derives a stream addressed by integers (for example step and
batch slot) rather than by call order, so two runs that consume different
amounts of randomness still agree on every shared address.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
# first spawn-key word of keyed streams; spawn() children use small indices, so the two never coincide
_KEYED_TAG = 0x6B657965


class SeededStream:
    """Deterministic random stream (Philox counter-based, splittable)."""

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed) & _MASK64
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def split(self, n: int) -> list["SeededStream"]:
        return [SeededStream(self.seed, s) for s in self._seq.spawn(n)]

    def child(self) -> "SeededStream":
        return self.split(1)[0]

    def keyed(self, *key: int) -> "SeededStream":
        """Stream addressed by ``key``; independent of how much of this stream was consumed."""
        if any(int(k) < 0 for k in key):
            raise ValueError("stream keys must be non-negative integers")
        seq = np.random.SeedSequence(self._seq.entropy,
                                     spawn_key=(*self._seq.spawn_key, _KEYED_TAG, *map(int, key)))
        return SeededStream(self.seed, seq)

    def uniform(self, size=None) -> np.ndarray | float:
        """Uniform draws on [0, 1)."""
        return self._gen.random(size)

    def normal(self, size=None) -> np.ndarray | float:
        """Standard normal draws via Box-Muller."""
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        u = self._gen.random(2 * pairs)
        u1 = 1.0 - u[:pairs]  # (0, 1], keeps log finite
        u2 = u[pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        z = z[:n]
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def integers(self, high: int, size=None):
        """Uniform integers on [0, high)."""
        out = self._gen.integers(0, high, size=size)
        return int(out) if size is None else out

    def choice(self, seq):
        return seq[self.integers(len(seq))]

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), uniformly."""
        return self._gen.permutation(n)[:k]

    def bernoulli(self, p: float) -> bool:
        return bool(self._gen.random() < p)

    def seed_int(self) -> int:
        """A 63-bit integer for seeding other generators (e.g. torch)."""
        return int(self._gen.integers(0, 2**63 - 1))


def seeded_stream(seed: int) -> SeededStream:
    return SeededStream(seed)
