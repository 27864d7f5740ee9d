"""Counter-based random numbers addressed by (seed, stream, step, item).

Every draw is a pure function of its address: the Philox key is the master
seed and the 256-bit counter encodes ``(block, 0, step, stream)``, where the
block index is derived from the item (chain or sample) index. Any item's
numbers can be regenerated alone, in any order or in parallel, without
replaying the others.
"""
from __future__ import annotations

import numpy as np

from .errors import ArgumentError

_MASK64 = (1 << 64) - 1
_WORDS_PER_BLOCK = 4

# Stream ids. Kept here so that every module addresses disjoint streams.
STREAM_CHAIN_INIT = 1
STREAM_CHAIN_STEP = 2
STREAM_TRAIN_LABEL = 10
STREAM_TRAIN_NULL = 11
STREAM_TRAIN_COMPONENT = 12
STREAM_TRAIN_DATA = 13
STREAM_TRAIN_TLAMBDA = 14
STREAM_TRAIN_FORWARD = 15
STREAM_TRAIN_QUERY = 16
STREAM_TARGET_SAMPLE = 20
STREAM_TARGET_COMPONENT = 21
STREAM_GRPO_PROMPTS = 30


class CounterRNG:
    def __init__(self, seed: int):
        seed = int(seed)
        if seed < 0 or seed >= 1 << 128:
            raise ArgumentError(f"seed must be in [0, 2**128), got {seed}")
        self.seed = seed
        self._key = [seed & _MASK64, seed >> 64]

    def __repr__(self):
        return f"CounterRNG(seed={self.seed})"

    def raw(self, stream: int, step: int, start: int, count: int, width: int) -> np.ndarray:
        """``(count, width)`` uint64 words for items ``start .. start+count-1``."""
        if count < 0 or start < 0 or width < 1:
            raise ArgumentError("need start >= 0, count >= 0, width >= 1")
        blocks = -(-width // _WORDS_PER_BLOCK)
        bg = np.random.Philox(key=self._key, counter=[start * blocks, 0, int(step), int(stream)])
        words = bg.random_raw(count * blocks * _WORDS_PER_BLOCK)
        return words.reshape(count, blocks * _WORDS_PER_BLOCK)[:, :width]

    def uniform(self, stream, step, start, count, width=1) -> np.ndarray:
        """Uniforms on the open interval (0, 1) with 53-bit resolution."""
        words = self.raw(stream, step, start, count, width)
        return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53

    def normal(self, stream, step, start, count, width=1) -> np.ndarray:
        """Standard normals via Box-Muller (fixed two words per pair)."""
        pairs = -(-width // 2)
        u = self.uniform(stream, step, start, count, 2 * pairs)
        r = np.sqrt(-2.0 * np.log(u[:, 0::2]))
        theta = 2.0 * np.pi * u[:, 1::2]
        z = np.empty((count, 2 * pairs))
        z[:, 0::2] = r * np.cos(theta)
        z[:, 1::2] = r * np.sin(theta)
        return z[:, :width]

    def generator(self, stream: int, step: int) -> np.random.Generator:
        """A numpy Generator for draws that need no per-item addressing."""
        return np.random.Generator(
            np.random.Philox(key=self._key, counter=[0, 1, int(step), int(stream)]))
