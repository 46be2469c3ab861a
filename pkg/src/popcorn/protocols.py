"""Interactive non-linear layers: blinded ReLU, pairwise secure max,
max-pooling tournaments and the fused relu->maxpool path.

Each protocol round is blind (server) -> respond (client) -> unblind (server).
The server reaches the client through ``ctx.roundtrip``, a callable mapping a
list of ciphertexts to the client's response list; the session module plugs
the wire in there, tests plug :func:`local_client` in.
"""
import math
import os
from dataclasses import dataclass, field

from . import paillier
from .compress import DenseInt, PrunedCodebook
from .encoding import EncTensor
from .errors import AbortReason, BoundOverflowError, ConfigurationError, DomainError, ProtocolAbort, ShapeError
from .linear import (LinearContext, eval_conv_partial, eval_pair_diff, output_bound,
                     padded_cells, plan_conv_diffs)
from .paillier import hadd, hmul_plain, hsub, mod_inverse
from .rng import Rng, as_rng

TEST_HOOKS_ENV = "POPCORN_TEST_HOOKS"


def test_hooks_enabled():
    return os.environ.get(TEST_HOOKS_ENV) == "1"


@dataclass(frozen=True)
class ReluConfig:
    dummy_min: int = 8
    dummy_frac: float = 0.1
    dummy_zero_prob: float = 0.5
    # test hooks; refused unless POPCORN_TEST_HOOKS=1
    force_tau_sign: int = None
    identity_permutation: bool = False

    def __post_init__(self):
        hooked = self.force_tau_sign is not None or self.identity_permutation
        if hooked and not test_hooks_enabled():
            raise ConfigurationError(f"test hooks require {TEST_HOOKS_ENV}=1")
        if self.force_tau_sign not in (None, 1, -1):
            raise ConfigurationError("force_tau_sign must be +1 or -1")
        if self.dummy_min < 0 or not 0 <= self.dummy_frac or not 0 <= self.dummy_zero_prob <= 1:
            raise ConfigurationError("invalid dummy policy")

    def dummy_count(self, m):
        return max(self.dummy_min, math.ceil(self.dummy_frac * m))


@dataclass
class BlindingRecord:
    """Server-private state of one round.  Refuses to be pickled."""
    context: str
    seed: bytes = field(repr=False)
    permutation: list = field(repr=False)
    taus: list = field(repr=False)
    tau_invs: list = field(repr=False)
    real_count: int = 0
    dummy_slots: frozenset = field(default=frozenset(), repr=False)
    dummy_values: dict = field(default_factory=dict, repr=False)
    shuffled: list = field(default=None, repr=False)

    def __reduce__(self):
        raise TypeError("a BlindingRecord must never leave the server")


@dataclass
class BlindedBatch:
    context: str
    cells: list

    def __len__(self):
        return len(self.cells)


@dataclass
class ProtocolContext(LinearContext):
    roundtrip: object = None
    relu_cfg: ReluConfig = field(default_factory=ReluConfig)

    def __post_init__(self):
        super().__post_init__()
        self.rng = as_rng(self.rng)

    def exchange(self, cells):
        self.ctr.round_trips += 1
        self.ctr.ciphertexts_sent += len(cells)
        resp = list(self.roundtrip(list(cells)))
        self.ctr.ciphertexts_received += len(resp)
        if len(resp) != len(cells):
            raise ProtocolAbort(AbortReason.MALFORMED, "response length differs from batch")
        return resp


def _draw_tau(n, bound, rng, sign=None):
    while True:
        mag = rng.randint(1, bound)
        s = sign if sign is not None else (-1 if rng.randbelow(2) else 1)
        tau = s * mag
        if math.gcd(mag, n) == 1:
            return tau


def _check_blindable(bound, codec):
    # codec guarantees plain_bound * blind_bound < n / 2
    if bound > codec.plain_bound:
        raise BoundOverflowError("value bound too large to blind without wraparound")


def server_blind_relu(cells, bound, pk, rng, cfg, codec, ctr=None):
    """Append dummies, shuffle, and blind each slot with a signed factor."""
    _check_blindable(bound, codec)
    rng = as_rng(rng)
    m = len(cells)
    t = cfg.dummy_count(m)
    seed = rng.randbytes(32)
    perm = list(range(m + t)) if cfg.identity_permutation else Rng(seed, "shuffle").permutation(m + t)
    dummy_values = {}
    dummies = []
    for d in range(t):
        v = 0 if rng.random() < cfg.dummy_zero_prob else rng.randint(1, max(1, bound))
        dummy_values[m + d] = v
        dummies.append(paillier.encrypt(v, pk, rng))
    pool = list(cells) + dummies
    shuffled = [pool[src] for src in perm]
    taus, invs, out = [], [], []
    for c in shuffled:
        tau = _draw_tau(pk.n, codec.blind_bound, rng, cfg.force_tau_sign)
        taus.append(tau)
        invs.append(mod_inverse(tau, pk.n))
        out.append(paillier.rerandomize(hmul_plain(c, tau, pk), pk, rng))
    if ctr is not None:
        ctr.hmul_plain_count += len(out)
    record = BlindingRecord("relu", seed, perm, taus, invs, m,
                            frozenset(i for i, src in enumerate(perm) if src >= m), dummy_values, shuffled)
    return BlindedBatch("relu", out), record


def client_respond(cells, sk, rng=None, codec=None):
    """Decrypt, clamp negatives to zero, re-encrypt with fresh randomness.

    Identical for relu and max rounds; the client cannot tell them apart.
    """
    pk = sk.public_key
    rng = as_rng(rng)
    out = []
    for c in cells:
        try:
            r = paillier.decrypt(c, sk)
        except DomainError:
            raise ProtocolAbort(AbortReason.MALFORMED, "malformed ciphertext") from None
        y = r if r <= pk.n // 2 else r - pk.n
        out.append(paillier.encrypt(y if y > 0 else 0, pk, rng))
    return out


def local_client(sk, rng=None):
    """A roundtrip callable that answers in-process (tests and benchmarks)."""
    rng = as_rng(rng)
    return lambda cells: client_respond(cells, sk, rng)


def server_unblind_relu(responses, record, pk, ctr=None):
    """Undo blinding, invert the shuffle and trim dummies."""
    if record.context != "relu" or len(responses) != len(record.permutation):
        raise ProtocolAbort(AbortReason.MALFORMED, "record and batch do not match")
    slots = [None] * len(responses)
    for i, resp in enumerate(responses):
        r = hmul_plain(resp, record.tau_invs[i], pk)
        if record.taus[i] < 0:
            r = hsub(record.shuffled[i], r, pk)
            if ctr is not None:
                ctr.hadd_count += 1
        slots[record.permutation[i]] = r
    if ctr is not None:
        ctr.hmul_plain_count += len(responses)
        ctr.comparisons_count += record.real_count
    return slots[:record.real_count]


def relu_cells(cells, bound, ctx):
    batch, record = server_blind_relu(cells, bound, ctx.pk, ctx.rng, ctx.relu_cfg, ctx.codec, ctx.ctr)
    responses = ctx.exchange(batch.cells)
    return server_unblind_relu(responses, record, ctx.pk, ctx.ctr)


def relu(x, ctx):
    return EncTensor(x.shape, relu_cells(x.cells, x.bound, ctx), x.scale_exp, x.bound)


def server_blind_max_pairs(diffs, bound, pk, rng, codec, ctr=None):
    """Shuffle pair differences globally and blind each with a positive factor."""
    _check_blindable(bound, codec)
    rng = as_rng(rng)
    seed = rng.randbytes(32)
    perm = Rng(seed, "shuffle").permutation(len(diffs))
    taus, invs, out = [], [], []
    for src in perm:
        tau = _draw_tau(pk.n, codec.blind_bound, rng, sign=1)
        taus.append(tau)
        invs.append(mod_inverse(tau, pk.n))
        out.append(paillier.rerandomize(hmul_plain(diffs[src], tau, pk), pk, rng))
    if ctr is not None:
        ctr.hmul_plain_count += len(out)
    return BlindedBatch("max", out), BlindingRecord("max", seed, perm, taus, invs, len(diffs))


def server_unblind_max(responses, record, xj_cts, pk, ctr=None):
    """E(max(x_i, x_j)) = E(x_j) + E(relu(x_i - x_j)) per pair, in input order."""
    if record.context != "max" or len(responses) != len(record.permutation) or len(xj_cts) != len(responses):
        raise ProtocolAbort(AbortReason.MALFORMED, "record and batch do not match")
    out = [None] * len(responses)
    for i, resp in enumerate(responses):
        src = record.permutation[i]
        out[src] = hadd(xj_cts[src], hmul_plain(resp, record.tau_invs[i], pk), pk)
    if ctr is not None:
        ctr.hmul_plain_count += len(responses)
        ctr.hadd_count += len(responses)
        ctr.comparisons_count += len(responses)
    return out


def max_round(diffs, xj, bound, ctx):
    batch, record = server_blind_max_pairs(diffs, bound, ctx.pk, ctx.rng, ctx.codec, ctx.ctr)
    responses = ctx.exchange(batch.cells)
    return server_unblind_max(responses, record, xj, ctx.pk, ctx.ctr)


def max_tournament(groups, bound, ctx, first_round=None):
    """Maximum of every group via ceil(log2 m) rounds of pairwise secure max.

    All groups advance together, so each round is one batch.  Within a group
    the candidates are paired at random; an odd one out waits a round.
    ``first_round`` optionally supplies, per group, precomputed
    ``([(x_j, x_i - x_j), ...], carried)`` for the opening round.
    """
    cands = [list(g) for g in groups]
    if first_round is not None:
        diffs, xj, owners = [], [], []
        for w, (pairs, carried) in enumerate(first_round):
            for cj, d in pairs:
                diffs.append(d)
                xj.append(cj)
                owners.append(w)
            cands[w] = list(carried)
        if diffs:
            for w, win in zip(owners, max_round(diffs, xj, 2 * bound, ctx)):
                cands[w].append(win)
    while any(len(c) > 1 for c in cands):
        diffs, xj, owners = [], [], []
        nxt = []
        for w, c in enumerate(cands):
            if len(c) == 1:
                nxt.append(c)
                continue
            c = ctx.rng.shuffled(c)
            for a in range(0, len(c) - 1, 2):
                diffs.append(hsub(c[a], c[a + 1], ctx.pk))
                xj.append(c[a + 1])
                owners.append(w)
            ctx.ctr.hadd_count += len(c) // 2
            nxt.append([c[-1]] if len(c) % 2 else [])
        for w, win in zip(owners, max_round(diffs, xj, 2 * bound, ctx)):
            nxt[w].append(win)
        cands = nxt
    return [c[0] for c in cands]


def pool_windows(shape, t, s):
    """Flat indices of each pooling window, ordered like the pooled output."""
    h, w, c = shape
    if not 1 <= s <= t or t > min(h, w) or (h - t) % s or (w - t) % s:
        raise ShapeError(f"input {shape} not coverable by window {t}, stride {s}")
    ho, wo = (h - t) // s + 1, (w - t) // s + 1
    windows = []
    for oy in range(ho):
        for ox in range(wo):
            for ch in range(c):
                windows.append([((oy * s + dy) * w + ox * s + dx) * c + ch for dy in range(t) for dx in range(t)])
    return windows, (ho, wo, c)


def maxpool(x, t, s, ctx):
    windows, out_shape = pool_windows(x.shape, t, s)
    if t == 1:
        return EncTensor(out_shape, [x.cells[w[0]] for w in windows], x.scale_exp, x.bound)
    groups = [[x.cells[i] for i in w] for w in windows]
    return EncTensor(out_shape, max_tournament(groups, x.bound, ctx), x.scale_exp, x.bound)


def fused_relu_maxpool(x, t, s, ctx):
    """relu(maxpool(x)): m - 1 max comparisons plus a single relu per window."""
    pooled = maxpool(x, t, s, ctx)
    return relu(pooled, ctx)


def fused_conv_relu_maxpool(x_in, layer, t, s, ctx):
    """conv -> relu -> maxpool where the opening max round uses the
    adjacent-output difference kernel instead of two full convolutions.

    Only the outputs that serve as ``x_j`` (or are carried) are evaluated in
    full; the partner of each pair enters only through its difference.
    """
    spec, wts = layer.spec, layer.weights
    if not isinstance(wts, (DenseInt, PrunedCodebook)):
        raise ShapeError("the difference kernel needs integer (non-binary) weights")
    plan = plan_conv_diffs(spec, wts, t, s, rng=ctx.rng)
    needed = {p.j for pairs in plan.pairs for p in pairs} | {c for cs in plan.carry for c in cs}
    conv_cells = eval_conv_partial(x_in, wts, layer.bias, spec, ctx, needed)
    bound = output_bound(wts.dense().reshape(spec.out_channels, -1), layer.bias, x_in.bound)
    cells = padded_cells(x_in, spec, ctx)
    first = []
    for pairs, carried in zip(plan.pairs, plan.carry):
        first.append(([(conv_cells[p.j], eval_pair_diff(cells, p, ctx)) for p in pairs],
                      [conv_cells[c] for c in carried]))
    winners = max_tournament([[None] * len(w) for w in plan.windows], bound, ctx, first_round=first)
    _, pooled_shape = pool_windows(spec.out_shape, t, s)
    out = relu_cells(winners, bound, ctx)
    return EncTensor(pooled_shape, out, x_in.scale_exp + wts.scale_exp, bound)
