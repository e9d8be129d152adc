"""
Seeded random streams for experiments.

Each (seed, stream name) pair maps to its own Philox counter-based generator,
so subsampling, gradient noise and finite-difference noise never share
state. Two arms run at the same seed see the same batches and the same noise
draws wherever their algorithms consume the same stream.

Gaussian draws use Box-Muller on the stream's uniforms rather than numpy's
ziggurat sampler, so the normal sequence is a fixed function of the Philox
output.
"""

import hashlib
from dataclasses import dataclass, field
from typing import Union

import numpy as np

Shape = Union[int, tuple[int, ...]]

STREAM_NAMES = ("subsample", "noise_w", "noise_fd", "init", "data", "analysis")


def stream_key(seed: int, name: str) -> int:
    """128-bit Philox key derived from the seed and stream name."""
    digest = hashlib.blake2b(f"{seed}/{name}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


class CounterStream:
    """One independent random stream."""

    def __init__(self, seed: int, name: str):
        self.seed = int(seed)
        self.name = name
        self._gen = np.random.Generator(np.random.Philox(key=stream_key(self.seed, name)))

    def uniform(self, size: Shape) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return self._gen.random(size)

    def normal(self, size: Shape, scale: float = 1.0) -> np.ndarray:
        """N(0, scale^2) draws via Box-Muller."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1], keeps log finite
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:count]
        return (z * scale).reshape(shape)

    def bernoulli(self, n: int, p: float) -> np.ndarray:
        return self._gen.random(n) < p

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


@dataclass
class ExperimentStreams:
    """
    The named streams of one experiment cell.

    Usage:
        streams = ExperimentStreams(seed=3)
        batch = poisson_batch(streams.subsample, n_examples, q)
        noise = streams.noise_w.normal(d, scale=sigma_w)
    """
    seed: int
    _streams: dict[str, CounterStream] = field(default_factory=dict, repr=False)

    def stream(self, name: str) -> CounterStream:
        if name not in STREAM_NAMES:
            raise ValueError(f"Unknown stream: {name}. Available: {list(STREAM_NAMES)}")
        if name not in self._streams:
            self._streams[name] = CounterStream(self.seed, name)
        return self._streams[name]

    @property
    def subsample(self) -> CounterStream:
        return self.stream("subsample")

    @property
    def noise_w(self) -> CounterStream:
        return self.stream("noise_w")

    @property
    def noise_fd(self) -> CounterStream:
        return self.stream("noise_fd")

    @property
    def init(self) -> CounterStream:
        return self.stream("init")
