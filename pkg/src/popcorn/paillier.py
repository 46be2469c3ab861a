"""Paillier additive homomorphic encryption with generator g = n + 1.

Plaintexts are residues in ``[0, n)``; signed values go through
:mod:`popcorn.encoding`.  All randomness comes from an explicit
:class:`~popcorn.rng.Rng` so protocol transcripts are reproducible under a
seed.
"""
import math
import struct
from dataclasses import dataclass, field

from . import _bigint
from ._bigint import gcd, invert, powmod
from .errors import ConfigurationError, DomainError, FormatError
from .rng import as_rng

SUPPORTED_BITS = (512, 1024, 2048, 3072)
KEY_MAGIC = b"PPKY"
KEY_VERSION = 1
_PUBLIC, _SECRET = 0, 1


@dataclass(frozen=True)
class PublicKey:
    n: int
    g: int = field(repr=False)
    n_squared: int = field(repr=False)
    bit_length: int

    @classmethod
    def from_n(cls, n):
        if n < 3 or n % 2 == 0:
            raise DomainError("modulus must be odd and > 2")
        return cls(n=n, g=n + 1, n_squared=n * n, bit_length=n.bit_length())

    @property
    def ciphertext_bytes(self):
        """Fixed serialized width of a ciphertext under this key."""
        return (self.n_squared.bit_length() + 7) // 8


@dataclass(frozen=True)
class SecretKey:
    p: int
    q: int
    lam: int = field(repr=False)
    mu: int = field(repr=False)
    public_key: PublicKey = field(repr=False)


@dataclass(frozen=True)
class Ciphertext:
    value: int


def _l_function(x, n):
    return (x - 1) // n


def keypair_from_primes(p, q):
    """Build a keypair from two given primes (used for toy-size oracles)."""
    if p == q:
        raise DomainError("p and q must differ")
    n = p * q
    if gcd(n, (p - 1) * (q - 1)) != 1:
        raise DomainError("gcd(pq, (p-1)(q-1)) != 1")
    pk = PublicKey.from_n(n)
    lam = math.lcm(p - 1, q - 1)
    u = _l_function(powmod(pk.g, lam, pk.n_squared), n)
    try:
        mu = invert(u, n)
    except ValueError:
        raise DomainError("L(g^lambda) is not invertible mod n") from None
    return pk, SecretKey(p=p, q=q, lam=lam, mu=mu, public_key=pk)


def keygen(bit_length, rng=None, max_attempts=64):
    """Generate a keypair whose modulus has exactly ``bit_length`` bits."""
    if bit_length not in SUPPORTED_BITS:
        raise ConfigurationError(f"unsupported key size {bit_length}; choose from {SUPPORTED_BITS}")
    rng = as_rng(rng)
    half = bit_length // 2
    for _ in range(max_attempts):
        p = _bigint.random_prime(half, rng)
        q = _bigint.random_prime(half, rng)
        if p is None or q is None:
            break
        if p == q or gcd(p * q, (p - 1) * (q - 1)) != 1:
            continue
        return keypair_from_primes(p, q)
    raise ConfigurationError("prime generation did not converge")


def _random_unit(n, rng):
    while True:
        r = 1 + rng.randbelow(n - 1)
        if gcd(r, n) == 1:
            return r


def encrypt(m, pk, rng=None, r=None):
    """Encrypt residue ``m``; ``r`` overrides the random unit (oracle use only)."""
    if not 0 <= m < pk.n:
        raise DomainError("plaintext must lie in [0, n)")
    if r is None:
        r = _random_unit(pk.n, as_rng(rng))
    elif gcd(r, pk.n) != 1:
        raise DomainError("r must be a unit mod n")
    # g^m = (1+n)^m = 1 + m*n (mod n^2)
    gm = (1 + m * pk.n) % pk.n_squared
    return Ciphertext(gm * powmod(r, pk.n, pk.n_squared) % pk.n_squared)


def rerandomize(c, pk, rng=None):
    """Multiply by a fresh encryption of zero; the plaintext is unchanged."""
    r = _random_unit(pk.n, as_rng(rng))
    return Ciphertext(c.value * powmod(r, pk.n, pk.n_squared) % pk.n_squared)


def decrypt(c, sk):
    pk = sk.public_key
    if not 0 <= c.value < pk.n_squared:
        raise DomainError("ciphertext must lie in [0, n^2)")
    return _l_function(powmod(c.value, sk.lam, pk.n_squared), pk.n) * sk.mu % pk.n


def hadd(c1, c2, pk):
    return Ciphertext(c1.value * c2.value % pk.n_squared)


def hneg(c, pk):
    """Encryption of ``-m`` via the inverse in Z*_{n^2}."""
    try:
        return Ciphertext(invert(c.value, pk.n_squared))
    except ValueError:
        raise DomainError("ciphertext is not a unit mod n^2") from None


def hsub(c1, c2, pk):
    return hadd(c1, hneg(c2, pk), pk)


def hmul_plain(c, k, pk, rng=None):
    """Encryption of ``m * k mod n`` for a signed integer ``k``.

    Negative ``k`` is evaluated as ``(c^-1)^|k|`` so small negative weights
    cost a short exponent instead of one of length n.  ``k = 0`` returns a
    fresh encryption of zero rather than the degenerate ciphertext 1.
    """
    if abs(k) >= pk.n:
        raise DomainError("|k| must be < n")
    if k == 0:
        return encrypt(0, pk, rng)
    if k > 0:
        return Ciphertext(powmod(c.value, k, pk.n_squared))
    return Ciphertext(powmod(hneg(c, pk).value, -k, pk.n_squared))


def mod_inverse(tau, n):
    try:
        return invert(tau % n, n)
    except ValueError:
        raise DomainError("tau is not invertible mod n") from None


# -- serialization ---------------------------------------------------------

def int_to_bytes(v, width=None):
    if width is None:
        width = max(1, (v.bit_length() + 7) // 8)
    return v.to_bytes(width, "big")


def ciphertext_to_bytes(c, width=None):
    """Length-prefixed (u32 BE) big-endian ciphertext.

    ``width=None`` gives the minimal encoding; sessions pass
    ``pk.ciphertext_bytes`` so every frame has a fixed, value-independent size.
    """
    raw = int_to_bytes(c.value, width)
    return struct.pack(">I", len(raw)) + raw


def ciphertext_from_bytes(buf, offset=0):
    """Parse one length-prefixed ciphertext; returns ``(ct, new_offset)``."""
    if offset + 4 > len(buf):
        raise FormatError("truncated ciphertext length")
    (size,) = struct.unpack_from(">I", buf, offset)
    offset += 4
    if offset + size > len(buf):
        raise FormatError("truncated ciphertext body")
    return Ciphertext(int.from_bytes(buf[offset:offset + size], "big")), offset + size


def _pack_int(v):
    raw = int_to_bytes(v)
    return struct.pack(">I", len(raw)) + raw


def _unpack_int(buf, offset):
    if offset + 4 > len(buf):
        raise FormatError("truncated integer")
    (size,) = struct.unpack_from(">I", buf, offset)
    offset += 4
    if offset + size > len(buf):
        raise FormatError("truncated integer")
    return int.from_bytes(buf[offset:offset + size], "big"), offset + size


def dump_public_key(pk):
    return KEY_MAGIC + struct.pack(">HB", KEY_VERSION, _PUBLIC) + _pack_int(pk.n) + _pack_int(pk.g)


def dump_secret_key(sk):
    return KEY_MAGIC + struct.pack(">HB", KEY_VERSION, _SECRET) + _pack_int(sk.p) + _pack_int(sk.q)


def load_key(buf):
    """Parse a PPKY container; returns a :class:`PublicKey` or :class:`SecretKey`."""
    if len(buf) < 7 or buf[:4] != KEY_MAGIC:
        raise FormatError("not a PPKY key file")
    version, kind = struct.unpack_from(">HB", buf, 4)
    if version != KEY_VERSION:
        raise FormatError(f"unsupported key version {version}")
    a, off = _unpack_int(buf, 7)
    b, off = _unpack_int(buf, off)
    if off != len(buf):
        raise FormatError("trailing bytes in key file")
    if kind == _PUBLIC:
        pk = PublicKey.from_n(a)
        if b != pk.g:
            raise FormatError("only g = n + 1 keys are supported")
        return pk
    if kind == _SECRET:
        return keypair_from_primes(a, b)[1]
    raise FormatError(f"unknown key kind {kind}")
