"""
Counter-based, splittable random streams.

Every stream is identified by the experiment seed and a path of
(purpose, index) keys. The path is hashed into a Philox key, so two streams
with different paths never share a sequence and the same
(seed, path, counter) always yields the same draws.
"""

import zlib
from dataclasses import dataclass

import numpy as np


def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """
    A reproducible random stream.

    Attributes:
        seed: Experiment seed (64-bit integer)
        path: Tuple of (purpose label, index) pairs leading from the root stream
        counter: Philox block counter at which generators start
    """

    seed: int
    path: tuple[tuple[str, int], ...] = ()
    counter: int = 0

    @property
    def stream_key(self) -> tuple[str, int]:
        """Last (purpose, index) pair of the path, ("root", 0) for the root stream."""
        return self.path[-1] if self.path else ("root", 0)

    def split(self, purpose: str, index: int = 0) -> "RngStream":
        """
        Derive an independent child stream.

        Args:
            purpose: Label describing what the child is used for
            index: Index distinguishing siblings with the same purpose

        Returns:
            Child stream starting at counter 0
        """
        return RngStream(self.seed, (*self.path, (purpose, int(index))), 0)

    def at(self, counter: int) -> "RngStream":
        """Same stream positioned at another counter."""
        return RngStream(self.seed, self.path, int(counter))

    def _key(self) -> np.ndarray:
        spawn_key = tuple(v for purpose, index in self.path for v in (_purpose_code(purpose), index))
        sequence = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=spawn_key)
        return sequence.generate_state(2, dtype=np.uint64)

    def generator(self) -> np.random.Generator:
        """Fresh numpy Generator positioned at this stream's counter."""
        return np.random.Generator(np.random.Philox(key=self._key(), counter=self.counter))

    def normal(self, size: int | tuple[int, ...]) -> np.ndarray:
        """Standard normal draws from the start of this stream."""
        return self.generator().standard_normal(size)

    def uniform(self, low: float, high: float, size: int | tuple[int, ...]) -> np.ndarray:
        """Uniform draws from the start of this stream."""
        return self.generator().uniform(low, high, size)
