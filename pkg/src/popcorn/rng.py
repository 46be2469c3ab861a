"""Seedable randomness and the labeled seed tree.

A seeded :class:`Rng` is a SHA-256 counter-mode stream, so every draw is a
pure function of (seed, labels) and is stable across Python versions.  An
unseeded :class:`Rng` reads the OS entropy pool.  ``child(label)`` derives an
independent sub-generator; switching one feature on or off therefore never
shifts the randomness of another.
"""
import hashlib
import hmac
import os


class Rng:
    def __init__(self, seed=None, label=""):
        if seed is None:
            self._key = None
        else:
            if isinstance(seed, int):
                seed = seed.to_bytes(max(1, (seed.bit_length() + 8) // 8), "big", signed=True)
            elif isinstance(seed, str):
                seed = seed.encode()
            self._key = hmac.new(b"popcorn-seed", bytes(seed) + b"|" + label.encode(), hashlib.sha256).digest()
        self._counter = 0
        self._buf = b""

    @property
    def seeded(self):
        return self._key is not None

    @property
    def key(self):
        """Derived key material; ``None`` for entropy-backed generators."""
        return self._key

    def child(self, label):
        if self._key is None:
            return Rng(None)
        return Rng(self._key, "child:" + label)

    def randbytes(self, k):
        if self._key is None:
            return os.urandom(k)
        while len(self._buf) < k:
            block = hashlib.sha256(self._key + self._counter.to_bytes(8, "big")).digest()
            self._counter += 1
            self._buf += block
        out, self._buf = self._buf[:k], self._buf[k:]
        return out

    def randbits(self, k):
        if k <= 0:
            return 0
        nbytes = (k + 7) // 8
        v = int.from_bytes(self.randbytes(nbytes), "big")
        return v >> (nbytes * 8 - k)

    def randbelow(self, n):
        """Uniform integer in ``[0, n)`` by rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        k = n.bit_length()
        while True:
            v = self.randbits(k)
            if v < n:
                return v

    def randint(self, a, b):
        """Uniform integer in ``[a, b]``."""
        return a + self.randbelow(b - a + 1)

    def random(self):
        return self.randbits(53) / (1 << 53)

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def shuffled(self, items):
        perm = self.permutation(len(items))
        return [items[p] for p in perm]

    def numpy_seed(self):
        """A 64-bit integer for seeding numpy generators."""
        return self.randbits(64)


def as_rng(rng):
    """Accept an :class:`Rng`, an int/bytes seed, or ``None`` (OS entropy)."""
    if isinstance(rng, Rng):
        return rng
    return Rng(rng)
