"""Deterministic splittable random streams.

Every draw in the system comes from a stream keyed by an integer tuple
(seed, lineage, site, instance, ...) folded through splitmix64. Keyed
derivation means any choice can be re-drawn independently of execution
order, which is what makes SMC results independent of worker count and
lets a guided run consume randomness compatibly with an unguided one.
"""

from __future__ import annotations

import hashlib
import math

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# fixed stream tags; values are arbitrary but frozen (serialized seeds depend on them)
TAG_CHOICE = 0x11
TAG_ENGINE = 0x22
TAG_SELECT = 0x33
TAG_INIT = 0x44
TAG_DATASET = 0x55
TAG_TRAIN = 0x66
# sub-streams within one choice
_SUB_VALUE = 1
_SUB_COMPONENT = 2


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def fold(*components: int) -> int:
    """Fold integer components into a 64-bit stream key."""
    key = 0
    for c in components:
        key = _mix((key + _GOLDEN + (c & _MASK64)) & _MASK64)
    return key


_site_key_cache: dict[str, int] = {}


def site_key(site_id: str) -> int:
    """Stable 64-bit key for a choice-site name (hash() is salted, so no)."""
    k = _site_key_cache.get(site_id)
    if k is None:
        k = int.from_bytes(hashlib.blake2b(site_id.encode(), digest_size=8).digest(), "big")
        _site_key_cache[site_id] = k
    return k


class KeyedStream:
    """Counter-based stream of doubles derived from a single 64-bit key."""

    __slots__ = ("_key", "_i")

    def __init__(self, key: int):
        self._key = key & _MASK64
        self._i = 0

    def _raw(self) -> int:
        self._i += 1
        return _mix((self._key + self._i * _GOLDEN) & _MASK64)

    def uniform(self) -> float:
        """Uniform in [0, 1)."""
        return (self._raw() >> 11) * 2.0 ** -53

    def normal(self) -> float:
        """Standard normal via Box-Muller."""
        u1 = ((self._raw() >> 11) + 1) * 2.0 ** -53  # (0, 1], log-safe
        u2 = (self._raw() >> 11) * 2.0 ** -53
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return int(self.uniform() * n) % n

    def shuffled(self, items):
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.randint(i + 1)
            out[i], out[j] = out[j], out[i]
        return out


class ChoiceDraw:
    """Randomness for one random choice.

    The value draw and the mixture-component draw come from separate
    sub-streams, so sampling a mixture consumes the *same* value normal a
    plain Gaussian would. A guide whose proposal equals the prior therefore
    reproduces the unguided draw bit-for-bit.
    """

    __slots__ = ("_value", "_component")

    def __init__(self, key: int):
        self._value = KeyedStream(fold(key, _SUB_VALUE))
        self._component = KeyedStream(fold(key, _SUB_COMPONENT))

    def normal(self) -> float:
        return self._value.normal()

    def uniform(self) -> float:
        return self._value.uniform()

    def component_uniform(self) -> float:
        return self._component.uniform()


class SeededDraws:
    """Per-choice ChoiceDraw factory keyed by (base key, site, instance)."""

    __slots__ = ("base_key",)

    def __init__(self, base_key: int):
        self.base_key = base_key & _MASK64

    def draw_for(self, site_id: str, instance_index: int) -> ChoiceDraw:
        return ChoiceDraw(fold(self.base_key, TAG_CHOICE, site_key(site_id), instance_index))


class ForcedDraws:
    """Test stub: every choice sees the same fixed normal/uniform values."""

    def __init__(self, z: float = 0.0, u: float = 0.9999, component_u: float = 0.0):
        self._z = z
        self._u = u
        self._cu = component_u

    def draw_for(self, site_id: str, instance_index: int) -> "ForcedDraws._Draw":
        return ForcedDraws._Draw(self._z, self._u, self._cu)

    class _Draw:
        __slots__ = ("_z", "_u", "_cu")

        def __init__(self, z, u, cu):
            self._z = z
            self._u = u
            self._cu = cu

        def normal(self) -> float:
            return self._z

        def uniform(self) -> float:
            return self._u

        def component_uniform(self) -> float:
            return self._cu
