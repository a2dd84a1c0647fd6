"""Portable counter-based random numbers.

The generator is SplitMix64 evaluated at an arbitrary position: output ``n``
of a stream with starting state ``s`` is ``mix64(s + (n + 1) * GAMMA)``
(all arithmetic mod 2**64). Any element can be drawn without touching the
ones before it, and the bit stream depends only on integer arithmetic.

Independent streams are addressed by name: the starting state for
``(seed, name)`` is ``mix64(seed ^ mix64(blake2b_64(name)))``, so noise
for a tensor depends on its key, not on the order keys are visited.

Gaussians use Box-Muller on consecutive pairs:
``u = ((x >> 11) + 0.5) * 2**-53`` lies strictly inside (0, 1), and
pair ``m`` yields ``r*cos(2*pi*u2)`` and ``r*sin(2*pi*u2)`` at positions
``2m`` and ``2m + 1`` with ``r = sqrt(-2 ln u1)``.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def name_hash(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


def stream_state(seed: int, name: str = "") -> int:
    return mix64((seed & MASK64) ^ mix64(name_hash(name)))


def splitmix64(state: int, start: int, n: int) -> np.ndarray:
    """Outputs ``start .. start+n-1`` of the SplitMix64 sequence seeded with ``state``."""
    counters = np.arange(start + 1, start + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(state & MASK64) + counters * np.uint64(GAMMA)
    return _mix64_array(z)


def uniform(state: int, n: int, start: int = 0) -> np.ndarray:
    bits = splitmix64(state, start, n)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normal(seed: int, name: str, n: int) -> np.ndarray:
    """``n`` standard-normal f64 samples for stream ``name``."""
    if n == 0:
        return np.zeros(0)
    pairs = (n + 1) // 2
    u = uniform(stream_state(seed, name), 2 * pairs)
    r = np.sqrt(-2.0 * np.log(u[0::2]))
    theta = 2.0 * np.pi * u[1::2]
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n]
