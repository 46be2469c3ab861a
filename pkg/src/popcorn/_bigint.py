"""Big-integer kernels with an accelerated gmpy2 path and a pure-Python fallback.

The backend is picked once at import time.  ``POPCORN_BIGINT=builtin`` forces
the fallback even when gmpy2 is installed; ``POPCORN_BIGINT=gmpy2`` makes a
missing gmpy2 an import error instead of a silent downgrade.
"""
import math
import os

_requested = os.environ.get("POPCORN_BIGINT", "auto").strip().lower()
if _requested not in ("auto", "gmpy2", "builtin"):
    raise ImportError(f"POPCORN_BIGINT must be auto, gmpy2 or builtin, not {_requested!r}")

try:
    if _requested == "builtin":
        raise ImportError
    import gmpy2
except ImportError:
    if _requested == "gmpy2":
        raise
    gmpy2 = None

BACKEND = "gmpy2" if gmpy2 is not None else "builtin"


if gmpy2 is not None:

    def powmod(base, exp, mod):
        return int(gmpy2.powmod(base, exp, mod))

    def invert(a, mod):
        try:
            return int(gmpy2.invert(a, mod))
        except ZeroDivisionError:
            raise ValueError("not invertible") from None

    gcd = math.gcd

else:

    def powmod(base, exp, mod):
        return pow(base, exp, mod)

    def invert(a, mod):
        return pow(a, -1, mod)

    gcd = math.gcd


_SMALL_PRIMES = [
    p for p in range(3, 2000)
    if all(p % d for d in range(2, int(p ** 0.5) + 1))
]


def is_probable_prime(n, rng, rounds=64):
    """Miller-Rabin with ``rounds`` random bases drawn from ``rng``."""
    if n < 2:
        return False
    if n in (2, 3):
        return True
    if n % 2 == 0:
        return False
    for p in _SMALL_PRIMES:
        if n == p:
            return True
        if n % p == 0:
            return False
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for _ in range(rounds):
        a = 2 + rng.randbelow(n - 3)
        x = powmod(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(r - 1):
            x = powmod(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


def random_prime(bits, rng, max_candidates=200_000, rounds=64):
    """Return a prime with exactly ``bits`` bits and its top two bits set.

    Setting the second-highest bit guarantees the product of two such primes
    has exactly ``2 * bits`` bits.
    """
    if bits < 4:
        raise ValueError("bits must be >= 4")
    top = (1 << (bits - 1)) | (1 << (bits - 2))
    for _ in range(max_candidates):
        cand = rng.randbits(bits) | top | 1
        if is_probable_prime(cand, rng, rounds):
            return cand
    return None
