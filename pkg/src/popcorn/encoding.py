"""Signed/fixed-point encoding into Z_n and shaped tensors.

Tensors are laid out row-major over ``(h, w, c)``.  Plain values are kept as
numpy object arrays of Python ints so intermediate products never overflow.
"""
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import paillier
from .errors import BoundOverflowError, FormatError, ShapeError
from .rng import as_rng

DEFAULT_PLAIN_BOUND = 2 ** 96
DEFAULT_BLIND_BOUND = 2 ** 64
DEFAULT_SCALE_EXP = 8

TENSOR_MAGIC = b"PPTN"
TENSOR_VERSION = 1


@dataclass(frozen=True)
class SignedCodec:
    n: int
    plain_bound: int = DEFAULT_PLAIN_BOUND
    blind_bound: int = DEFAULT_BLIND_BOUND

    def __post_init__(self):
        if self.plain_bound < 1 or self.blind_bound < 1:
            raise ValueError("bounds must be >= 1")
        # x * tau must never wrap around n
        if 2 * self.plain_bound * self.blind_bound >= self.n:
            raise ValueError("plain_bound * blind_bound must stay below n/2")

    @classmethod
    def for_key(cls, pk, plain_bound=DEFAULT_PLAIN_BOUND, blind_bound=DEFAULT_BLIND_BOUND):
        return cls(pk.n, plain_bound, blind_bound)

    @property
    def half_n(self):
        return self.n // 2

    def encode(self, x):
        if abs(x) > self.plain_bound:
            raise BoundOverflowError(f"|{x}| exceeds plain bound")
        return x % self.n

    def decode(self, r):
        return r if r <= self.half_n else r - self.n


def encode_signed(x, codec):
    return codec.encode(x)


def decode_signed(r, codec):
    return codec.decode(r)


def quantize_fixed(x, f, bound=None):
    """Round ``x * 2**f`` half away from zero."""
    v = Fraction(x) * (1 << f) if f >= 0 else Fraction(x) / (1 << -f)
    mag = abs(v)
    q = int(mag + Fraction(1, 2))  # floor for non-negative values
    q = q if v >= 0 else -q
    if bound is not None and abs(q) > bound:
        raise BoundOverflowError(f"quantized value {q} exceeds bound {bound}")
    return q


def quantize_array(values, f, bound=None):
    flat = [quantize_fixed(float(v), f, bound) for v in np.asarray(values, dtype=float).ravel()]
    return np.array(flat, dtype=object).reshape(np.shape(values))


def dequantize(q, f):
    return q / (1 << f) if f >= 0 else q * (1 << -f)


@dataclass
class PlainTensor:
    values: np.ndarray
    scale_exp: int = 0
    bound: int = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=object)
        if self.values.ndim == 0:
            self.values = self.values.reshape(1)
        actual = max((abs(int(v)) for v in self.values.flat), default=0)
        if self.bound is None:
            self.bound = actual
        elif actual > self.bound:
            raise BoundOverflowError("tensor value exceeds declared bound")

    @property
    def shape(self):
        return tuple(self.values.shape)

    @classmethod
    def from_real(cls, x, f=DEFAULT_SCALE_EXP, bound=None):
        q = quantize_array(x, f)
        return cls(q, f, bound)

    def dequantize(self):
        return np.array([dequantize(int(v), self.scale_exp) for v in self.values.flat]).reshape(self.shape)

    def tolist(self):
        return [int(v) for v in self.values.flat]

    def __eq__(self, other):
        if not isinstance(other, PlainTensor):
            return NotImplemented
        return (self.shape == other.shape and self.scale_exp == other.scale_exp
                and self.tolist() == other.tolist())


@dataclass
class EncTensor:
    shape: tuple
    cells: list = field(repr=False)
    scale_exp: int = 0
    bound: int = 0

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        if len(self.cells) != int(np.prod(self.shape, dtype=np.int64)):
            raise ShapeError(f"{len(self.cells)} cells do not fill shape {self.shape}")

    def __len__(self):
        return len(self.cells)

    def reshape(self, shape):
        return EncTensor(tuple(shape), self.cells, self.scale_exp, self.bound)


def encrypt_tensor(t, pk, rng=None, codec=None):
    codec = codec or SignedCodec.for_key(pk)
    if t.bound > codec.plain_bound:
        raise BoundOverflowError("tensor bound exceeds codec plain bound")
    rng = as_rng(rng)
    cells = [paillier.encrypt(codec.encode(int(v)), pk, rng) for v in t.values.flat]
    return EncTensor(t.shape, cells, t.scale_exp, t.bound)


def decrypt_tensor(t, sk, codec=None):
    codec = codec or SignedCodec.for_key(sk.public_key)
    vals = [codec.decode(paillier.decrypt(c, sk)) for c in t.cells]
    return PlainTensor(np.array(vals, dtype=object).reshape(t.shape), t.scale_exp, max(t.bound, max(map(abs, vals), default=0)))


# -- PPTN file format (little-endian) ---------------------------------------

def tensor_to_bytes(t):
    out = [TENSOR_MAGIC, struct.pack("<HB", TENSOR_VERSION, len(t.shape))]
    out.append(struct.pack(f"<{len(t.shape)}I", *t.shape))
    out.append(struct.pack("<h", t.scale_exp))
    vals = t.tolist()
    if any(not -(1 << 63) <= v < (1 << 63) for v in vals):
        raise BoundOverflowError("PPTN stores i64 values only")
    out.append(np.asarray(vals, dtype="<i8").tobytes())
    return b"".join(out)


def tensor_from_bytes(buf):
    if buf[:4] != TENSOR_MAGIC:
        raise FormatError("not a PPTN tensor file")
    try:
        version, rank = struct.unpack_from("<HB", buf, 4)
        if version != TENSOR_VERSION:
            raise FormatError(f"unsupported tensor version {version}")
        dims = struct.unpack_from(f"<{rank}I", buf, 7)
        off = 7 + 4 * rank
        (scale,) = struct.unpack_from("<h", buf, off)
        off += 2
    except struct.error as exc:
        raise FormatError("truncated tensor header") from exc
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != 8 * count:
        raise FormatError("tensor payload size mismatch")
    vals = np.frombuffer(buf, dtype="<i8", count=count, offset=off)
    return PlainTensor(np.array([int(v) for v in vals], dtype=object).reshape(dims), scale)


def write_tensor(path, t):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def read_tensor(path):
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
