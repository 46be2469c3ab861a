"""Server-side model preparation: BN folding, pruning, codebook quantization,
binarization and integerization, plus the PPMD model container.

Weight layouts: conv filters are ``(c_out, f_h, f_w, f_c)``; fc matrices are
``(out_dim, in_dim)``.  Activations are row-major ``(h, w, c)``.
"""
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .encoding import quantize_fixed
from .errors import FormatError, ShapeError
from .rng import Rng

KINDS = ("conv", "fc", "relu", "maxpool", "flatten")
LINEAR_KINDS = ("conv", "fc")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_shape: tuple
    filter_shape: tuple = ()  # (f_h, f_w, f_c) for conv
    out_channels: int = 0     # c_o for conv, out_dim for fc
    stride: int = 1
    padding: int = 0
    window: int = 0           # maxpool t

    def __post_init__(self):
        object.__setattr__(self, "in_shape", tuple(int(d) for d in self.in_shape))
        object.__setattr__(self, "filter_shape", tuple(int(d) for d in self.filter_shape))
        if self.kind not in KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv":
            h, w, c = self.in_shape
            fh, fw, fc = self.filter_shape
            if fc != c:
                raise ShapeError("conv filter depth must equal input channels")
            if fh > h + 2 * self.padding or fw > w + 2 * self.padding or self.stride < 1:
                raise ShapeError("conv filter does not fit the padded input")
            if self.out_channels < 1:
                raise ShapeError("conv needs at least one filter")
        elif self.kind == "maxpool":
            h, w, _ = self.in_shape
            t, s = self.window, self.stride
            if not 1 <= s <= t or t > min(h, w):
                raise ShapeError("maxpool needs 1 <= s <= t <= input dim")
            if (h - t) % s or (w - t) % s:
                raise ShapeError("input dims not coverable by (t, s)")
        elif self.kind == "fc":
            if self.out_channels < 1:
                raise ShapeError("fc needs out_dim >= 1")

    @property
    def in_dim(self):
        return int(np.prod(self.in_shape))

    @property
    def out_dim(self):
        return self.out_channels

    @property
    def out_shape(self):
        if self.kind == "conv":
            h, w, _ = self.in_shape
            fh, fw, _ = self.filter_shape
            p, s = self.padding, self.stride
            return ((h + 2 * p - fh) // s + 1, (w + 2 * p - fw) // s + 1, self.out_channels)
        if self.kind == "fc":
            return (self.out_channels,)
        if self.kind == "maxpool":
            h, w, c = self.in_shape
            t, s = self.window, self.stride
            return ((h - t) // s + 1, (w - t) // s + 1, c)
        if self.kind == "flatten":
            return (self.in_dim,)
        return self.in_shape

    @property
    def weight_shape(self):
        if self.kind == "conv":
            return (self.out_channels,) + self.filter_shape
        if self.kind == "fc":
            return (self.out_channels, self.in_dim)
        return ()


@dataclass(frozen=True)
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        if np.any(np.asarray(self.var) + self.eps <= 0):
            raise ValueError("var + eps must be positive")


# -- weight variants --------------------------------------------------------

@dataclass
class DenseReal:
    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape


@dataclass
class DenseInt:
    values: np.ndarray
    scale_exp: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)

    @property
    def shape(self):
        return self.values.shape

    def dense(self):
        return self.values.copy()


@dataclass
class PrunedCodebook:
    shape: tuple
    indices: np.ndarray   # flat positions of surviving weights, strictly increasing
    codes: np.ndarray     # codeword id per surviving weight
    codebook: np.ndarray  # integer codewords
    bits: int
    scale_exp: int = 0
    centroids: np.ndarray = field(default=None, repr=False)  # real-valued, pre-integerization

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.codes = np.asarray(self.codes, dtype=np.int64)
        self.codebook = np.asarray(self.codebook, dtype=np.int64)
        if self.indices.size and np.any(np.diff(self.indices) <= 0):
            raise ValueError("indices must be strictly increasing")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= len(self.codebook)):
            raise ValueError("codeword id out of range")
        if len(self.codebook) > (1 << self.bits):
            raise ValueError("codebook larger than 2**bits")

    def dense(self):
        out = np.zeros(int(np.prod(self.shape)), dtype=np.int64)
        out[self.indices] = self.codebook[self.codes]
        return out.reshape(self.shape)


@dataclass
class Binary:
    signs: np.ndarray  # True -> +1, False -> -1
    scale_exp: int = 0

    def __post_init__(self):
        self.signs = np.asarray(self.signs, dtype=bool)

    @property
    def shape(self):
        return self.signs.shape

    def dense(self):
        return np.where(self.signs, 1, -1).astype(np.int64)


VARIANT_TAGS = {DenseReal: 1, DenseInt: 2, PrunedCodebook: 3, Binary: 4}


@dataclass
class Layer:
    spec: LayerSpec
    weights: object = None
    bias: np.ndarray = None
    name: str = ""
    bn: BNParams = None

    @property
    def kind(self):
        return self.spec.kind

    @property
    def integerized(self):
        return self.spec.kind not in LINEAR_KINDS or isinstance(self.weights, (DenseInt, PrunedCodebook, Binary))


@dataclass
class Model:
    input_shape: tuple
    layers: list
    input_scale: int = 0  # fixed-point exponent the model expects its input at

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.spec.in_shape != shape:
                raise ShapeError(f"layer {i} expects {layer.spec.in_shape}, gets {shape}")
            if not layer.name:
                layer.name = f"L{i}:{layer.kind}"
            if layer.spec.kind in LINEAR_KINDS:
                if tuple(layer.weights.shape) != layer.spec.weight_shape:
                    raise ShapeError(f"layer {i} weight shape {layer.weights.shape} != {layer.spec.weight_shape}")
                if layer.bias is not None and len(layer.bias) != layer.spec.out_channels:
                    raise ShapeError(f"layer {i} bias length mismatch")
            shape = layer.spec.out_shape

    @property
    def output_shape(self):
        return self.layers[-1].spec.out_shape if self.layers else self.input_shape

    def activation_counts(self):
        return [int(np.prod(layer.spec.out_shape)) for layer in self.layers]

    def scales(self):
        """Fixed-point exponent of each layer's output."""
        out, f = [], self.input_scale
        for layer in self.layers:
            if layer.spec.kind in LINEAR_KINDS:
                f += getattr(layer.weights, "scale_exp", 0)
            out.append(f)
        return out

    @property
    def output_scale(self):
        s = self.scales()
        return s[-1] if s else self.input_scale


# -- transforms -------------------------------------------------------------

def fold_bn(weights, bias, bn):
    """Absorb a batch-norm that follows a linear layer into its weights/bias.

    Works on real-valued arrays with the output channel on axis 0.
    """
    w = np.asarray(weights, dtype=float)
    c_out = w.shape[0]
    gamma, beta, mean, var = (np.asarray(a, dtype=float) for a in (bn.gamma, bn.beta, bn.mean, bn.var))
    if not all(a.shape == (c_out,) for a in (gamma, beta, mean, var)):
        raise ShapeError("batch-norm channel count does not match layer outputs")
    b = np.zeros(c_out) if bias is None else np.asarray(bias, dtype=float)
    scale = gamma / np.sqrt(var + bn.eps)
    w2 = w * scale.reshape((c_out,) + (1,) * (w.ndim - 1))
    b2 = (b - mean) * scale + beta
    return w2, b2


def prune_magnitude(weights, ratio):
    """Mask removing the ``floor(ratio * count)`` smallest-magnitude weights.

    Among equal magnitudes the lower flat index is removed first.
    """
    if not 0 <= ratio < 1:
        raise ValueError("ratio must lie in [0, 1)")
    w = np.asarray(weights, dtype=float)
    k = int(math.floor(ratio * w.size))
    mask = np.ones(w.size, dtype=bool)
    if k:
        order = np.argsort(np.abs(w).ravel(), kind="stable")
        mask[order[:k]] = False
    return mask.reshape(w.shape)


def _kmeans_pp_init(values, k, rng):
    centers = [values[rng.integers(len(values))]]
    for _ in range(1, k):
        d2 = np.min((values[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            break
        centers.append(values[rng.choice(len(values), p=d2 / total)])
    return np.array(centers)


def lloyd_1d(values, k, seed=0, max_iter=100, tol=1e-9):
    """1-D k-means (k-means++ init).  Returns ``(centroids, labels)``.

    When there are no more distinct values than clusters the codebook is the
    set of distinct values and reconstruction is exact.
    """
    values = np.asarray(values, dtype=float).ravel()
    distinct = np.unique(values)
    if len(distinct) <= k:
        labels = np.searchsorted(distinct, values)
        return distinct, labels
    rng = np.random.default_rng(seed)
    centers = np.sort(_kmeans_pp_init(values, k, rng))
    for _ in range(max_iter):
        labels = np.argmin(np.abs(values[:, None] - centers[None, :]), axis=1)
        new = centers.copy()
        for j in range(len(centers)):
            members = values[labels == j]
            if members.size:
                new[j] = members.mean()
        shift = np.max(np.abs(new - centers))
        centers = new
        if shift <= tol:
            break
    centers = np.unique(centers)
    labels = np.argmin(np.abs(values[:, None] - centers[None, :]), axis=1)
    return centers, labels


def quantize_codebook(weights, mask, bits, scale_exp=8, seed=0):
    """Cluster surviving weights into at most ``2**bits`` integer codewords.

    Codewords that round to zero at ``scale_exp`` are dropped together with
    the weights mapped to them, and codewords that round to the same integer
    are merged.
    """
    if not 1 <= bits <= 12:
        raise ValueError("bits must lie in [1, 12]")
    w = np.asarray(weights, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != w.shape:
        raise ShapeError("mask shape differs from weights")
    idx = np.flatnonzero(mask.ravel())
    vals = w.ravel()[idx]
    if idx.size == 0:
        return PrunedCodebook(w.shape, idx, idx, np.zeros(0, dtype=np.int64), bits, scale_exp, np.zeros(0))
    centroids, labels = lloyd_1d(vals, 1 << bits, seed)
    ints = np.array([quantize_fixed(float(c), scale_exp) for c in centroids], dtype=np.int64)
    book = np.unique(ints[ints != 0])
    keep = ints[labels] != 0
    codes = np.searchsorted(book, ints[labels][keep])
    return PrunedCodebook(w.shape, idx[keep], codes, book, bits, scale_exp, centroids)


def binarize(weights):
    """Sign of each weight, with sign(0) = +1."""
    return Binary(np.asarray(weights, dtype=float) >= 0)


def integerize(weights, scale_exp=8):
    w = np.asarray(weights, dtype=float)
    vals = [quantize_fixed(float(v), scale_exp) for v in w.ravel()]
    return DenseInt(np.array(vals, dtype=np.int64).reshape(w.shape), scale_exp)


def integerize_bias(bias, scale_exp):
    return np.array([quantize_fixed(float(b), scale_exp) for b in np.asarray(bias, dtype=float)], dtype=np.int64)


# -- per-layer priority analysis -------------------------------------------

@dataclass
class LayerReport:
    name: str
    kind: str
    prune_ratio: float
    bits: int
    ciphertexts_per_weight: float
    weights_per_ciphertext: float
    muladd_before: int
    muladd_after: int
    prune_rank: int = 0
    quant_rank: int = 0


@dataclass
class PruneQuantReport:
    layers: list

    def prune_order(self):
        return [r.name for r in sorted(self.layers, key=lambda r: r.prune_rank)]

    def quant_order(self):
        return [r.name for r in sorted(self.layers, key=lambda r: r.quant_rank)]

    CSV_FIELDS = ("name", "kind", "prune_ratio", "bits", "ciphertexts_per_weight",
                  "weights_per_ciphertext", "muladd_before", "muladd_after", "prune_rank", "quant_rank")

    def rows(self):
        return [{f: getattr(r, f) for f in self.CSV_FIELDS} for r in self.layers]


def receptive_fields(spec):
    """Input indices feeding each output position.

    Returns ``(in_idx, padded_shape)`` where ``in_idx[p, k]`` is the flat
    index (into the zero-padded input) of filter tap ``k`` at output position
    ``p``.  Tap order matches the flattened filter, so the weight of filter
    ``j`` at tap ``k`` is ``weights.reshape(c_out, -1)[j, k]``.  For fc there
    is one position covering the whole input.
    """
    if spec.kind == "fc":
        return np.arange(spec.in_dim, dtype=np.int64)[None, :], (spec.in_dim,)
    if spec.kind != "conv":
        raise ShapeError("receptive fields exist only for linear layers")
    h, w, c = spec.in_shape
    fh, fw, _ = spec.filter_shape
    p, s = spec.padding, spec.stride
    hp, wp = h + 2 * p, w + 2 * p
    ho, wo, _ = spec.out_shape
    oy, ox, dy, dx, ch = np.meshgrid(np.arange(ho), np.arange(wo), np.arange(fh), np.arange(fw), np.arange(c), indexing="ij")
    idx = ((oy * s + dy) * wp + (ox * s + dx)) * c + ch
    return idx.reshape(ho * wo, fh * fw * c).astype(np.int64), (hp, wp, c)


def dense_weights(weights):
    if isinstance(weights, DenseReal):
        return np.asarray(weights.values, dtype=float)
    return weights.dense()


def count_hmul(spec, weights):
    """hmul_plain count the linear evaluator will spend (ex-bias), computed
    structurally without any cryptography."""
    if isinstance(weights, Binary):
        return 0
    in_idx, _ = receptive_fields(spec)
    W = dense_weights(weights).reshape(spec.out_channels, -1)
    if isinstance(weights, (DenseInt, DenseReal)):
        return in_idx.size * spec.out_channels
    pairs = set()
    for k in range(W.shape[1]):
        vals = {int(v) for v in W[:, k] if v != 0}
        for i in np.unique(in_idx[:, k]):
            pairs.update((int(i), v) for v in vals)
    return len(pairs)


def layer_priority_report(model):
    """Per-layer pruning/quantization priorities for linear layers.

    Conv: each weight touches ``w_in**2 / s**2`` ciphertexts and each
    ciphertext touches ``c_o * f_w**2 / s**2`` weights; fc: 1 and ``out_dim``.
    Larger values rank first.
    """
    rows = []
    for layer in model.layers:
        spec = layer.spec
        if spec.kind not in LINEAR_KINDS:
            continue
        if spec.kind == "conv":
            h, w, _ = spec.in_shape
            fh, fw, _ = spec.filter_shape
            s2 = spec.stride ** 2
            ct_per_w = h * w / s2
            w_per_ct = spec.out_channels * fh * fw / s2
        else:
            ct_per_w = 1.0
            w_per_ct = float(spec.out_channels)
        weights = layer.weights
        total = int(np.prod(spec.weight_shape))
        if isinstance(weights, PrunedCodebook):
            ratio, bits = 1 - len(weights.indices) / total, weights.bits
        elif isinstance(weights, Binary):
            ratio, bits = 0.0, 1
        else:
            dense = dense_weights(weights)
            ratio, bits = float(np.count_nonzero(dense == 0)) / total, 64
        in_idx, _ = receptive_fields(spec)
        before = in_idx.size * spec.out_channels
        rows.append(LayerReport(layer.name, spec.kind, ratio, bits, ct_per_w, w_per_ct,
                                before, count_hmul(spec, weights)))
    for rank, r in enumerate(sorted(rows, key=lambda r: -r.ciphertexts_per_weight)):
        r.prune_rank = rank
    for rank, r in enumerate(sorted(rows, key=lambda r: -r.weights_per_ciphertext)):
        r.quant_rank = rank
    return PruneQuantReport(rows)


def compress_model(model, scale_exp=8, prune=0.0, bits=None, binarize_weights=False, seed=0, overrides=None):
    """Fold BN, then prune/quantize or binarize every linear layer.

    ``overrides`` maps layer names to ``{"prune": r, "bits": b}``.  Layers are
    processed in the order suggested by :func:`layer_priority_report`.  The
    result is an integerized model expecting input at ``scale_exp``; each bias
    is integerized at its layer's output scale.
    """
    if binarize_weights and bits is not None:
        raise ValueError("bits and binarize are mutually exclusive")
    overrides = overrides or {}
    layers = [replace(layer) for layer in model.layers]
    for layer in layers:
        if layer.bn is not None:
            w, b = fold_bn(dense_weights(layer.weights), layer.bias, layer.bn)
            layer.weights, layer.bias, layer.bn = DenseReal(w), b, None
    report = layer_priority_report(Model(model.input_shape, layers, scale_exp))
    by_name = {layer.name: layer for layer in layers}
    seeds = Rng(seed)
    for name in report.prune_order():
        layer = by_name[name]
        w = dense_weights(layer.weights)
        opts = overrides.get(name, {})
        ratio = opts.get("prune", prune)
        nbits = opts.get("bits", bits)
        if binarize_weights or opts.get("binarize"):
            layer.weights = binarize(w)
        elif ratio > 0 or nbits is not None:
            mask = prune_magnitude(w, ratio)
            layer.weights = quantize_codebook(w, mask, nbits or 12, scale_exp, seeds.child(name).numpy_seed())
        else:
            layer.weights = integerize(w, scale_exp)
    f = scale_exp
    for layer in layers:
        if layer.spec.kind in LINEAR_KINDS:
            f += layer.weights.scale_exp
            bias = np.zeros(layer.spec.out_channels) if layer.bias is None else layer.bias
            layer.bias = integerize_bias(bias, f)
    return Model(model.input_shape, layers, scale_exp)


# -- synthetic models -------------------------------------------------------

def build_model(desc, seed=0):
    """Real-valued model from a JSON-style description.

    ``desc = {"input_shape": [h, w, c], "layers": [{"kind": "conv", "filters": 4,
    "size": 3, "stride": 1, "padding": 1, "bn": true}, {"kind": "relu"}, ...]}``
    """
    rng = np.random.default_rng(seed)
    shape = tuple(desc["input_shape"])
    layers = []
    for i, d in enumerate(desc["layers"]):
        kind = d["kind"]
        name = d.get("name", f"L{i}:{kind}")
        if kind == "conv":
            size = d.get("size", 3)
            spec = LayerSpec("conv", shape, (size, size, shape[2]), d["filters"], d.get("stride", 1), d.get("padding", 0))
            fan_in = size * size * shape[2]
        elif kind == "fc":
            spec = LayerSpec("fc", shape, out_channels=d["out"])
            fan_in = spec.in_dim
        elif kind == "maxpool":
            t = d.get("window", 2)
            spec = LayerSpec("maxpool", shape, window=t, stride=d.get("stride", t))
        else:
            spec = LayerSpec(kind, shape)
        layer = Layer(spec, name=name)
        if kind in LINEAR_KINDS:
            std = d.get("std", 1.0 / math.sqrt(fan_in))
            layer.weights = DenseReal(rng.normal(0.0, std, spec.weight_shape))
            layer.bias = rng.normal(0.0, d.get("bias_std", 0.1), spec.out_channels)
            if d.get("bn"):
                c = spec.out_channels
                layer.bn = BNParams(rng.uniform(0.5, 1.5, c), rng.normal(0, 0.1, c),
                                    rng.normal(0, 0.1, c), rng.uniform(0.5, 1.5, c))
        layers.append(layer)
        shape = spec.out_shape
    return Model(tuple(desc["input_shape"]), layers, 0)


def load_model_json(path, seed=0):
    with open(path) as fh:
        desc = json.load(fh)
    return build_model(desc, desc.get("seed", seed))


# -- PPMD file format (little-endian) ---------------------------------------

MODEL_MAGIC = b"PPMD"
MODEL_VERSION = 1
_KIND_CODES = {k: i for i, k in enumerate(KINDS)}


def _spec_dims(spec):
    if spec.kind == "conv":
        return list(spec.in_shape) + list(spec.filter_shape[:2]) + [spec.out_channels, spec.stride, spec.padding]
    if spec.kind == "fc":
        return [spec.in_dim, spec.out_channels]
    if spec.kind == "maxpool":
        return [spec.window, spec.stride]
    return []


def model_to_bytes(model):
    out = [MODEL_MAGIC, struct.pack("<HH", MODEL_VERSION, len(model.layers))]
    out.append(struct.pack("<B", len(model.input_shape)) + struct.pack(f"<{len(model.input_shape)}I", *model.input_shape))
    out.append(struct.pack("<h", model.input_scale))
    for layer in model.layers:
        spec = layer.spec
        dims = _spec_dims(spec)
        out.append(struct.pack("<BB", _KIND_CODES[spec.kind], len(dims)) + struct.pack(f"<{len(dims)}I", *dims))
        w = layer.weights
        if spec.kind not in LINEAR_KINDS:
            out.append(struct.pack("<B", 0))
            continue
        out.append(struct.pack("<Bh", VARIANT_TAGS[type(w)], getattr(w, "scale_exp", 0)))
        if isinstance(w, DenseReal):
            out.append(np.asarray(w.values, dtype="<f8").tobytes())
            out.append(np.asarray(layer.bias, dtype="<f8").tobytes())
            continue
        if isinstance(w, DenseInt):
            out.append(w.values.astype("<i8").tobytes())
        elif isinstance(w, PrunedCodebook):
            out.append(struct.pack("<BIH", w.bits, len(w.indices), len(w.codebook)))
            out.append(w.indices.astype("<u4").tobytes())
            out.append(w.codes.astype("<u2").tobytes())
            out.append(w.codebook.astype("<i8").tobytes())
        elif isinstance(w, Binary):
            out.append(np.packbits(w.signs.ravel()).tobytes())
        out.append(np.asarray(layer.bias, dtype="<i8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf, self.off = buf, 0

    def unpack(self, fmt):
        try:
            vals = struct.unpack_from(fmt, self.buf, self.off)
        except struct.error as exc:
            raise FormatError("truncated model file") from exc
        self.off += struct.calcsize(fmt)
        return vals

    def array(self, dtype, count):
        size = np.dtype(dtype).itemsize * count
        if self.off + size > len(self.buf):
            raise FormatError("truncated model file")
        a = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.off)
        self.off += size
        return a.copy()


def model_from_bytes(buf):
    if buf[:4] != MODEL_MAGIC:
        raise FormatError("not a PPMD model file")
    r = _Reader(buf)
    r.off = 4
    version, nlayers = r.unpack("<HH")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    (rank,) = r.unpack("<B")
    input_shape = r.unpack(f"<{rank}I")
    (input_scale,) = r.unpack("<h")
    shape, layers = tuple(input_shape), []
    for _ in range(nlayers):
        code, ndims = r.unpack("<BB")
        if code >= len(KINDS):
            raise FormatError(f"unknown layer kind code {code}")
        kind = KINDS[code]
        dims = r.unpack(f"<{ndims}I")
        if kind == "conv":
            h, w, c, fh, fw, co, s, p = dims
            spec = LayerSpec("conv", (h, w, c), (fh, fw, c), co, s, p)
        elif kind == "fc":
            spec = LayerSpec("fc", shape, out_channels=dims[1])
            if dims[0] != spec.in_dim:
                raise FormatError("fc input dim mismatch")
        elif kind == "maxpool":
            spec = LayerSpec("maxpool", shape, window=dims[0], stride=dims[1])
        else:
            spec = LayerSpec(kind, shape)
        (tag,) = r.unpack("<B")
        layer = Layer(spec)
        if tag:
            (scale,) = r.unpack("<h")
            wshape = spec.weight_shape
            count = int(np.prod(wshape))
            nout = spec.out_channels
            if tag == 1:
                layer.weights = DenseReal(r.array("<f8", count).reshape(wshape))
                layer.bias = r.array("<f8", nout)
            else:
                if tag == 2:
                    layer.weights = DenseInt(r.array("<i8", count).reshape(wshape), scale)
                elif tag == 3:
                    bits, nnz, nbook = r.unpack("<BIH")
                    idx = r.array("<u4", nnz).astype(np.int64)
                    codes = r.array("<u2", nnz).astype(np.int64)
                    book = r.array("<i8", nbook)
                    layer.weights = PrunedCodebook(wshape, idx, codes, book, bits, scale)
                elif tag == 4:
                    packed = r.array("u1", (count + 7) // 8)
                    layer.weights = Binary(np.unpackbits(packed)[:count].astype(bool).reshape(wshape), scale)
                else:
                    raise FormatError(f"unknown weight variant {tag}")
                layer.bias = r.array("<i8", nout)
        layers.append(layer)
        shape = spec.out_shape
    if r.off != len(buf):
        raise FormatError("trailing bytes in model file")
    return Model(tuple(input_shape), layers, input_scale)


def write_model(path, model):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def read_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
