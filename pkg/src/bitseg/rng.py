"""Deterministic 64-bit generator behind the scene synthesizer.

This is the splitmix-style sequence: the state advances by the odd constant
GAMMA = 0x9E3779B97F4A7C15 and each output is the finalizer

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

applied to the advanced state (all arithmetic mod 2**64). The k-th draw
after state s0 is therefore finalize(s0 + k*GAMMA), so a block of draws
vectorizes as a counter sweep with no sequential dependency. Any
implementation that fixes these constants reproduces the raw word stream
bit for bit; the constants are repeated in the README for cross-language
checks. Derived quantities mirror the usual recipes: doubles take the top
53 bits, Gaussians come from a Box-Muller pair.

numpy's own generators are deliberately not used here: dataset bytes are a
contract, and this keeps them pinned to ~15 lines of arithmetic rather
than to a library's stream evolution.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1

_TWO53 = float(1 << 53)


def mix(z: int) -> int:
    """The output finalizer on a plain python integer."""
    z &= _MASK
    z ^= z >> 30
    z = (z * _MIX1) & _MASK
    z ^= z >> 27
    z = (z * _MIX2) & _MASK
    z ^= z >> 31
    return z


def derive(*keys: int) -> int:
    """Fold integer keys into a stream state, order-sensitively.

    s <- mix(s*GAMMA + k + 1) per key; multiplication by the odd GAMMA is a
    bijection mod 2**64, so distinct key tuples land on well-spread states.
    """
    s = 0
    for k in keys:
        s = mix((s * GAMMA + (int(k) & _MASK) + 1) & _MASK)
    return s


class Stream:
    """Sequential draws from one state, with vectorized block output."""

    __slots__ = ("state",)

    def __init__(self, *keys: int):
        self.state = derive(*keys) if keys else 0

    def raw(self, n: int) -> np.ndarray:
        """The next n 64-bit words as uint64."""
        if n < 0:
            raise ValueError("draw count must be >= 0")
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
        z = np.uint64(self.state) + steps
        z ^= z >> np.uint64(30)
        z *= np.uint64(_MIX1)
        z ^= z >> np.uint64(27)
        z *= np.uint64(_MIX2)
        z ^= z >> np.uint64(31)
        self.state = (self.state + n * GAMMA) & _MASK
        return z

    def floats(self, n: int) -> np.ndarray:
        """n float64 values in [0, 1): the top 53 bits over 2**53."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) / _TWO53

    def uniform(self, lo: float, hi: float, n: int | None = None):
        u = self.floats(1 if n is None else n) * (hi - lo) + lo
        return float(u[0]) if n is None else u

    def integers(self, lo: int, hi: int, n: int | None = None):
        """Integers in [lo, hi], both ends inclusive."""
        if hi < lo:
            raise ValueError(f"empty integer range [{lo}, {hi}]")
        u = self.floats(1 if n is None else n)
        v = np.minimum((u * (hi - lo + 1)).astype(np.int64) + lo, hi)
        return int(v[0]) if n is None else v

    def normals(self, n: int) -> np.ndarray:
        """n standard Gaussians via Box-Muller."""
        pairs = (n + 1) // 2
        # shift into (0, 1] so the log never sees zero
        u1 = ((self.raw(pairs) >> np.uint64(11)).astype(np.float64) + 1.0) / _TWO53
        u2 = self.floats(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]
