"""Named, reproducible random streams.

Every source of randomness in the simulator is a :class:`RngStream`,
identified by a 64-bit ``(seed, stream_id)`` pair on top of the
counter-based Philox generator.  Streams with equal identifiers yield
identical draws; streams with distinct identifiers are statistically
independent.  Child streams are derived from the parent's identifier and a
sequence of tags (``stream.child("round", t, "client", i)``), never from
the parent's mutable state, so the draw order of one component can never
leak into another and results stay bit-identical under any worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF


def _splitmix64(x: int) -> int:
    """One round of the SplitMix64 finalizer; spreads tag bits over 64 bits."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _tag_to_int(tag: int | str) -> int:
    if isinstance(tag, bool) or not isinstance(tag, (int, str)):
        raise TypeError(f"stream tag must be int or str, got {tag!r}")
    if isinstance(tag, int):
        return tag & _MASK64
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """A named random stream over the Philox counter-based generator.

    The ``(seed, stream_id)`` pair fully determines the sequence of draws.
    Drawing advances this stream in place; deriving children does not.
    """

    __slots__ = ("seed", "stream_id", "_generator")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._generator: np.random.Generator | None = None

    @property
    def generator(self) -> np.random.Generator:
        if self._generator is None:
            key = np.array([self.seed, self.stream_id], dtype=np.uint64)
            self._generator = np.random.Generator(np.random.Philox(key=key))
        return self._generator

    def child(self, *tags: int | str) -> "RngStream":
        """Derive an independent stream named by ``tags``.

        Pure function of ``(seed, stream_id, tags)``: it does not consume
        or depend on this stream's draw position.
        """
        sid = self.stream_id
        for tag in tags:
            sid = _splitmix64(sid ^ _splitmix64(_tag_to_int(tag)))
        return RngStream(self.seed, sid)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def rng_uniform(stream: RngStream, lo: float, hi: float) -> float:
    """Draw one value from U(lo, hi), advancing the stream."""
    if lo > hi:
        raise ValueError(f"uniform bounds out of order: lo={lo} > hi={hi}")
    return float(stream.generator.uniform(lo, hi))
