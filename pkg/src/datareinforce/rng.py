"""Counter-based deterministic random streams.

Every random decision in this package is drawn from a `SeededRng`, which wraps
numpy's Philox counter-based bit generator keyed by ``(seed, stream)``.  Two
generators built from the same pair produce identical draw sequences on any
machine and in any process, which is what makes stored augmentations
replayable and reinforcement generation independent of worker count.

Stream ids are derived with `derive_stream`, a splitmix64-style hash over a
domain tag plus integer components (image id, epoch, slot index, ...).  Domain
tags keep unrelated consumers on disjoint streams even when their component
tuples collide.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Domain tags for derive_stream.  Keep values stable: stored artifacts depend
# on them.
STREAM_SPLIT = 1
STREAM_SYNTH = 2
STREAM_REINFORCE = 3
STREAM_EPOCH_PLAN = 4
STREAM_TRAIN_INIT = 5
STREAM_TRAIN_SHUFFLE = 6
STREAM_ONLINE_AUG = 7
STREAM_SELECT = 8


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_stream(*components: int) -> int:
    """Hash integer components into a 64-bit stream id.

    The hash is order sensitive and collision resistant enough for stream
    separation: distinct component tuples map to distinct streams with
    overwhelming probability.
    """
    h = 0x5851F42D4C957F2D
    for c in components:
        h = _splitmix64(h ^ (int(c) & _MASK64))
    return h


class SeededRng:
    """Deterministic random source for a (seed, stream) pair.

    The underlying generator is Philox (counter based), so construction is
    O(1) and draw sequences depend only on the key, never on global state.
    """

    ALGORITHM = "philox4x64"

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def derive(self, *components: int) -> "SeededRng":
        """Child generator on the stream hash(self.stream, *components)."""
        return SeededRng(self.seed, derive_stream(self.stream, *components))

    # Draw helpers. All delegate to the wrapped numpy Generator so dtypes and
    # algorithms stay consistent across the package.

    def random(self) -> float:
        return float(self._gen.random())

    def uniform(self, low: float, high: float) -> float:
        return float(self._gen.uniform(low, high))

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high). Scalar when size is None."""
        out = self._gen.integers(low, high, size=size)
        if size is None:
            return int(out)
        return out

    def beta(self, a: float, b: float) -> float:
        return float(self._gen.beta(a, b))

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)
