"""Homomorphic evaluation of conv/fc layers over element-wise encrypted tensors.

Every linear layer is treated as ``y[p, k] = sum_t W[k, t] * x[in_idx[p, t]] + b[k]``
where ``p`` ranges over output positions, ``k`` over filters and ``t`` over
filter taps (see :func:`popcorn.compress.receptive_fields`).  Outputs are
laid out ``p * c_out + k``, i.e. row-major ``(h, w, c)``.
"""
from dataclasses import dataclass, field, fields

import numpy as np

from . import paillier
from .compress import Binary, DenseInt, LayerSpec, PrunedCodebook, receptive_fields
from .encoding import EncTensor, SignedCodec
from .errors import BoundOverflowError, ShapeError
from .paillier import hadd, hmul_plain, hneg, hsub


@dataclass
class OpCounter:
    hmul_plain_count: int = 0
    bias_hmul_count: int = 0
    hadd_count: int = 0
    muladd_count: int = 0
    comparisons_count: int = 0
    ciphertexts_sent: int = 0
    ciphertexts_received: int = 0
    round_trips: int = 0

    def snapshot(self):
        return OpCounter(**self.as_dict())

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def __sub__(self, other):
        return OpCounter(**{k: v - getattr(other, k) for k, v in self.as_dict().items()})

    def __add__(self, other):
        return OpCounter(**{k: v + getattr(other, k) for k, v in self.as_dict().items()})


@dataclass
class LinearContext:
    """Server-side resources a linear layer needs besides its input."""
    pk: paillier.PublicKey
    ctr: OpCounter = field(default_factory=OpCounter)
    one: paillier.Ciphertext = None  # client-supplied E(1), carries biases
    rng: object = None
    codec: SignedCodec = None

    def __post_init__(self):
        if self.codec is None:
            self.codec = SignedCodec.for_key(self.pk)


def _sum(cts, pk, ctr):
    acc = cts[0]
    for c in cts[1:]:
        acc = hadd(acc, c, pk)
        ctr.hadd_count += 1
    return acc


def padded_cells(x, spec, ctx):
    """Flat list of input ciphertexts with zero padding materialized."""
    if spec.kind == "fc" or spec.padding == 0:
        return list(x.cells)
    h, w, c = spec.in_shape
    p = spec.padding
    zero = paillier.encrypt(0, ctx.pk, ctx.rng)
    grid = [zero] * ((h + 2 * p) * (w + 2 * p) * c)
    wp = w + 2 * p
    for y in range(h):
        for xx in range(w):
            base = ((y + p) * wp + xx + p) * c
            src = (y * w + xx) * c
            grid[base:base + c] = x.cells[src:src + c]
    return grid


def _check_input(x, spec):
    if spec.kind == "fc":
        if len(x) != spec.in_dim:
            raise ShapeError(f"fc expects {spec.in_dim} inputs, got {len(x)}")
    elif x.shape != spec.in_shape:
        raise ShapeError(f"conv expects {spec.in_shape}, got {x.shape}")


def output_bound(W, bias, bound_in):
    W = np.asarray(W, dtype=object).reshape(len(W), -1)
    best = 0
    for k in range(W.shape[0]):
        b = 0 if bias is None else abs(int(bias[k]))
        best = max(best, sum(abs(int(v)) for v in W[k]) * bound_in + b)
    return best


class _Empty:
    """Marker for an output that has received no term yet."""


_EMPTY = _Empty()


def _add_bias(acc, bias, ctx):
    """Add ``bias[k]`` to every output of filter ``k``; one hmul per distinct value.

    ``None`` entries (outputs skipped by a partial evaluation) stay ``None``.
    """
    if bias is None or not np.any(np.asarray(bias) != 0):
        return
    if ctx.one is None:
        raise ValueError("non-zero bias needs the client's E(1)")
    c_out = len(bias)
    cache = {}
    for idx, cur in enumerate(acc):
        b = int(bias[idx % c_out])
        if cur is None or b == 0:
            continue
        term = cache.get(b)
        if term is None:
            term = hmul_plain(ctx.one, b, ctx.pk)
            ctx.ctr.bias_hmul_count += 1
            cache[b] = term
        if cur is _EMPTY:
            acc[idx] = term
        else:
            acc[idx] = hadd(cur, term, ctx.pk)
            ctx.ctr.hadd_count += 1


def _finish(acc, ctx):
    """Replace outputs that received no term with fresh encryptions of zero."""
    zero = None
    for i, c in enumerate(acc):
        if c is _EMPTY:
            if zero is None:
                zero = paillier.encrypt(0, ctx.pk, ctx.rng)
            acc[i] = zero
    return acc


def _eval_products(cells, in_idx, W, ctx, reuse, only=None):
    """Accumulate the weighted sums; ``reuse`` shares products per (input, value).

    With ``reuse`` zero weights are skipped; without it every tap is computed.
    ``only`` restricts evaluation to a set of flat output indices (others None).
    """
    P, K = in_idx.shape
    c_out = W.shape[0]
    pk, ctr = ctx.pk, ctx.ctr
    acc = [None] * (P * c_out)
    cache = {}
    for p in range(P):
        taps = in_idx[p]
        for k in range(c_out):
            o = p * c_out + k
            if only is not None and o not in only:
                continue
            cur = _EMPTY
            row = W[k]
            for t in range(K):
                wv = int(row[t])
                i = int(taps[t])
                if reuse:
                    if wv == 0:
                        continue
                    prod = cache.get((i, wv))
                    if prod is None:
                        prod = hmul_plain(cells[i], wv, pk, ctx.rng)
                        ctr.hmul_plain_count += 1
                        cache[(i, wv)] = prod
                else:
                    prod = hmul_plain(cells[i], wv, pk, ctx.rng)
                    ctr.hmul_plain_count += 1
                ctr.muladd_count += 1
                if cur is _EMPTY:
                    cur = prod
                else:
                    cur = hadd(cur, prod, pk)
                    ctr.hadd_count += 1
            acc[o] = cur
    return acc


def _linear(x, wts, bias, spec, ctx, only=None):
    _check_input(x, spec)
    if isinstance(wts, Binary):
        return eval_binarized(x, wts, spec, ctx, bias)
    if not isinstance(wts, (DenseInt, PrunedCodebook)):
        raise TypeError("weights must be integerized (DenseInt, PrunedCodebook or Binary)")
    W = wts.dense().reshape(spec.out_channels, -1)
    bound = output_bound(W, bias, x.bound)
    if bound > ctx.codec.plain_bound:
        raise BoundOverflowError("certified output bound exceeds plain bound")
    in_idx, _ = receptive_fields(spec)
    cells = padded_cells(x, spec, ctx)
    acc = _eval_products(cells, in_idx, W, ctx, reuse=isinstance(wts, PrunedCodebook), only=only)
    _add_bias(acc, bias, ctx)
    _finish(acc, ctx)
    return EncTensor(spec.out_shape, acc, x.scale_exp + wts.scale_exp, bound) if only is None else acc


def eval_fc(x, wts, bias, ctx):
    spec = LayerSpec("fc", (len(x),), out_channels=wts.shape[0])
    return _linear(x.reshape((len(x),)), wts, bias, spec, ctx)


def eval_conv(x, wts, bias, spec, ctx):
    return _linear(x, wts, bias, spec, ctx)


def eval_conv_partial(x, wts, bias, spec, ctx, outputs):
    """Evaluate only the listed flat output indices; returns a sparse list."""
    return _linear(x, wts, bias, spec, ctx, only=set(outputs))


def eval_layer(layer, x, ctx):
    if layer.spec.kind == "conv":
        return eval_conv(x, layer.weights, layer.bias, layer.spec, ctx)
    if layer.spec.kind == "fc":
        return eval_fc(x, layer.weights, layer.bias, ctx)
    raise ShapeError(f"{layer.spec.kind} is not a linear layer")


def eval_binarized(x, wts, spec, ctx, bias=None):
    """Evaluate a {-1,+1} layer with additions only.

    Per position the full receptive-field sum ``S`` is built once and shared
    by all filters.  Each filter then sums only its minority-sign taps
    ``M``: ``2M - S`` when +1 is the minority, ``S - 2M`` otherwise.
    """
    _check_input(x, spec)
    pk, ctr = ctx.pk, ctx.ctr
    signs = np.asarray(wts.signs).reshape(spec.out_channels, -1)
    W = np.where(signs, 1, -1)
    bound = output_bound(W, bias, x.bound)
    if bound > ctx.codec.plain_bound:
        raise BoundOverflowError("certified output bound exceeds plain bound")
    in_idx, _ = receptive_fields(spec)
    cells = padded_cells(x, spec, ctx)
    P, K = in_idx.shape
    c_out = signs.shape[0]
    plus_taps = [np.flatnonzero(signs[k]) for k in range(c_out)]
    minus_taps = [np.flatnonzero(~signs[k]) for k in range(c_out)]
    acc = [None] * (P * c_out)
    for p in range(P):
        taps = [cells[int(i)] for i in in_idx[p]]
        S = _sum(taps, pk, ctr)
        for k in range(c_out):
            plus, minus = plus_taps[k], minus_taps[k]
            if len(plus) <= len(minus):
                if len(plus) == 0:
                    out = hneg(S, pk)
                    ctr.hadd_count += 1
                else:
                    M = _sum([taps[t] for t in plus], pk, ctr)
                    out = hsub(hadd(M, M, pk), S, pk)
                    ctr.hadd_count += 2
            else:
                if len(minus) == 0:
                    out = S
                else:
                    M = _sum([taps[t] for t in minus], pk, ctr)
                    out = hsub(S, hadd(M, M, pk), pk)
                    ctr.hadd_count += 2
            acc[p * c_out + k] = out
    _add_bias(acc, bias, ctx)
    return EncTensor(spec.out_shape, acc, x.scale_exp + wts.scale_exp, bound)


def eval_binarized_naive(x, wts, spec, ctx):
    """Reference: signed accumulation, one hadd/hsub per tap after the first."""
    pk, ctr = ctx.pk, ctx.ctr
    signs = np.asarray(wts.signs).reshape(spec.out_channels, -1)
    in_idx, _ = receptive_fields(spec)
    cells = padded_cells(x, spec, ctx)
    P, K = in_idx.shape
    acc = []
    for p in range(P):
        for k in range(signs.shape[0]):
            cur = None
            for t in range(K):
                c = cells[int(in_idx[p, t])]
                if cur is None:
                    cur = c if signs[k, t] else hneg(c, pk)
                else:
                    cur = hadd(cur, c, pk) if signs[k, t] else hsub(cur, c, pk)
                    ctr.hadd_count += 1
            acc.append(cur)
    return EncTensor(spec.out_shape, acc, x.scale_exp, output_bound(np.where(signs, 1, -1), None, x.bound))


# -- adjacent-convolution difference kernel ---------------------------------

@dataclass
class PairDiff:
    """Encrypted ``conv[i] - conv[j]`` for two adjacent outputs of one filter.

    ``terms`` lists ``(padded_input_index, coefficient)``: weight deltas over
    the overlapped region plus each output's exclusive taps.
    """
    i: int
    j: int
    terms: list


@dataclass
class ConvDiffPlan:
    spec: LayerSpec
    window: int
    pool_stride: int
    windows: list  # flat conv-output indices of each pooling window
    pairs: list    # per window: first-round PairDiff list
    carry: list    # per window: unpaired output indices

    def pair_count(self):
        return sum(len(p) for p in self.pairs)


def _pair_terms(in_idx, W, pi, pj, k):
    coeff = {}
    for t, i in enumerate(in_idx[pi]):
        coeff[int(i)] = coeff.get(int(i), 0) + int(W[k, t])
    for t, i in enumerate(in_idx[pj]):
        coeff[int(i)] = coeff.get(int(i), 0) - int(W[k, t])
    return [(i, c) for i, c in sorted(coeff.items()) if c != 0]


def plan_conv_diffs(spec, weights, t, s_pool, rng=None):
    """Pair adjacent conv outputs inside every pooling window.

    Within each ``t x t`` window the outputs are paired along rows (or along
    columns, chosen per window when ``rng`` is given); a leftover output
    when ``t`` is odd is carried to the next tournament round.
    """
    if spec.kind != "conv":
        raise ShapeError("difference plans need a conv layer")
    ho, wo, c_out = spec.out_shape
    if not 1 <= s_pool <= t or (ho - t) % s_pool or (wo - t) % s_pool:
        raise ShapeError("pooling window does not tile the conv output")
    W = weights.dense().reshape(c_out, -1)
    in_idx, _ = receptive_fields(spec)
    windows, pairs, carry = [], [], []
    for oy in range(0, ho - t + 1, s_pool):
        for ox in range(0, wo - t + 1, s_pool):
            vertical = rng is not None and rng.randbelow(2) == 1
            for k in range(c_out):
                grid = [[(oy + a) * wo + (ox + b) for b in range(t)] for a in range(t)]
                if vertical:
                    grid = [list(col) for col in zip(*grid)]
                members, wp, wc = [], [], []
                for line in grid:
                    for b in range(0, t - 1, 2):
                        pi, pj = line[b], line[b + 1]
                        if rng is not None and rng.randbelow(2):
                            pi, pj = pj, pi
                        wp.append(PairDiff(pi * c_out + k, pj * c_out + k, _pair_terms(in_idx, W, pi, pj, k)))
                    if t % 2:
                        wc.append(line[-1] * c_out + k)
                    members.extend(p * c_out + k for p in line)
                windows.append(members)
                pairs.append(wp)
                carry.append(wc)
    return ConvDiffPlan(spec, t, s_pool, windows, pairs, carry)


def eval_pair_diff(cells, pair, ctx):
    """``cells``: padded input ciphertexts (see :func:`padded_cells`)."""
    pk, ctr = ctx.pk, ctx.ctr
    cur = None
    for i, coeff in pair.terms:
        prod = hmul_plain(cells[i], coeff, pk)
        ctr.hmul_plain_count += 1
        ctr.muladd_count += 1
        if cur is None:
            cur = prod
        else:
            cur = hadd(cur, prod, pk)
            ctr.hadd_count += 1
    if cur is None:
        cur = paillier.encrypt(0, pk, ctx.rng)
    return cur


def naive_pair_diff(cells, spec, weights, i, j, ctx):
    """Reference: evaluate both outputs in full, then subtract."""
    c_out = spec.out_channels
    W = weights.dense().reshape(c_out, -1)
    in_idx, _ = receptive_fields(spec)
    k = i % c_out
    if j % c_out != k:
        raise ShapeError("pair outputs must belong to the same filter")
    outs = []
    for o in (i, j):
        p = o // c_out
        cur = None
        for t in range(in_idx.shape[1]):
            wv = int(W[k, t])
            if wv == 0:
                continue
            prod = hmul_plain(cells[int(in_idx[p, t])], wv, ctx.pk)
            ctx.ctr.hmul_plain_count += 1
            ctx.ctr.muladd_count += 1
            if cur is None:
                cur = prod
            else:
                cur = hadd(cur, prod, ctx.pk)
                ctx.ctr.hadd_count += 1
        outs.append(cur)
    ctx.ctr.hadd_count += 1
    return hsub(outs[0], outs[1], ctx.pk)
