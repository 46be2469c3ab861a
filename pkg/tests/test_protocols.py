import pickle

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from popcorn import paillier, plain
from popcorn.encoding import EncTensor, PlainTensor, decrypt_tensor, encrypt_tensor
from popcorn.errors import ConfigurationError, ProtocolAbort, ShapeError
from popcorn.protocols import (ReluConfig, client_respond, fused_relu_maxpool, max_tournament, maxpool,
                               relu, server_blind_max_pairs, server_blind_relu, server_unblind_max,
                               server_unblind_relu)
from popcorn.rng import Rng


def enc(ctx, values, bound=None):
    t = PlainTensor(np.asarray(values, dtype=object), 0, bound)
    return encrypt_tensor(t, ctx.pk, Rng(42), ctx.codec)


def dec(ctx, sk, cells):
    return [ctx.codec.decode(paillier.decrypt(c, sk)) for c in cells]


def test_relu_example(make_ctx, key512):
    ctx = make_ctx()
    y = relu(enc(ctx, [-3, 0, 5, -1], 10), ctx)
    assert decrypt_tensor(y, key512[1], ctx.codec).tolist() == [0, 0, 5, 0]
    assert ctx.ctr.round_trips == 1
    assert ctx.ctr.ciphertexts_sent == 4 + 8


def test_relu_positive_identity(make_ctx, key512):
    ctx = make_ctx(1)
    y = relu(enc(ctx, list(range(1, 30))), ctx)
    assert decrypt_tensor(y, key512[1], ctx.codec).tolist() == list(range(1, 30))


@pytest.mark.parametrize("sign", [1, -1])
def test_relu_forced_sign(make_ctx, key512, sign):
    ctx = make_ctx(2, ReluConfig(force_tau_sign=sign))
    vals = list(np.random.default_rng(sign + 5).integers(-1000, 1000, 50)) + [0, 0]
    y = relu(enc(ctx, vals), ctx)
    assert decrypt_tensor(y, key512[1], ctx.codec).tolist() == [max(int(v), 0) for v in vals]


def test_degenerate_blinding_hook(make_ctx, key512):
    ctx = make_ctx(3, ReluConfig(force_tau_sign=1, identity_permutation=True, dummy_min=0, dummy_frac=0))
    ctx.codec = type(ctx.codec)(ctx.pk.n, 2 ** 40, 1)
    x = enc(ctx, [4, -7, 0, 9])
    batch, record = server_blind_relu(x.cells, x.bound, ctx.pk, ctx.rng, ctx.relu_cfg, ctx.codec)
    assert dec(ctx, key512[1], batch.cells) == [4, -7, 0, 9]


def test_hooks_require_env(monkeypatch):
    monkeypatch.delenv("POPCORN_TEST_HOOKS")
    with pytest.raises(ConfigurationError):
        ReluConfig(force_tau_sign=1)
    with pytest.raises(ConfigurationError):
        ReluConfig(identity_permutation=True)
    ReluConfig()


def test_dummy_policy_and_record(make_ctx):
    cfg = ReluConfig()
    assert cfg.dummy_count(10) == 8 and cfg.dummy_count(200) == 20
    ctx = make_ctx(4)
    x = enc(ctx, list(range(-50, 50)), 100)
    batch, record = server_blind_relu(x.cells, 100, ctx.pk, ctx.rng, cfg, ctx.codec)
    assert len(batch) == 100 + 10 and len(record.dummy_slots) == 10
    assert sorted(record.permutation) == list(range(110))
    assert all(t != 0 and abs(t) <= ctx.codec.blind_bound for t in record.taus)
    assert all(0 <= v <= 100 for v in record.dummy_values.values())
    with pytest.raises(TypeError):
        pickle.dumps(record)


def test_zero_count_visible_to_client(make_ctx, key512):
    pk, sk = key512
    ctx = make_ctx(5)
    vals = [0, 3, 0, -2, 0, 7]
    x = enc(ctx, vals, 10)
    batch, record = server_blind_relu(x.cells, 10, pk, ctx.rng, ctx.relu_cfg, ctx.codec)
    seen_zeros = sum(1 for v in dec(ctx, sk, batch.cells) if v == 0)
    zero_dummies = sum(1 for v in record.dummy_values.values() if v == 0)
    assert seen_zeros == 3 + zero_dummies


def test_blinded_values_vary(make_ctx, key512):
    seen = set()
    for seed in range(20):
        ctx = make_ctx(seed)
        x = enc(ctx, [5])
        batch, record = server_blind_relu(x.cells, 5, ctx.pk, ctx.rng, ctx.relu_cfg, ctx.codec)
        slot = record.permutation.index(0)
        seen.add(dec(ctx, key512[1], [batch.cells[slot]])[0])
    assert len(seen) == 20


def test_client_respond(key512):
    pk, sk = key512
    rng = Rng(6)
    cells = [paillier.encrypt(-12 % pk.n, pk, rng), paillier.encrypt(7, pk, rng)]
    out = client_respond(cells, sk, rng)
    assert [paillier.decrypt(c, sk) for c in out] == [0, 7]
    assert out[1] != cells[1]
    with pytest.raises(ProtocolAbort):
        client_respond([paillier.Ciphertext(pk.n_squared + 1)], sk, rng)


def test_unblind_mismatch_aborts(make_ctx):
    ctx = make_ctx(7)
    x = enc(ctx, [1, 2])
    batch, record = server_blind_relu(x.cells, 2, ctx.pk, ctx.rng, ctx.relu_cfg, ctx.codec)
    with pytest.raises(ProtocolAbort):
        server_unblind_relu(batch.cells[:-1], record, ctx.pk)


@pytest.mark.parametrize("a,b,want", [(9, 4, 9), (4, 4, 4), (-2, -7, -2), (-7, -2, -2)])
def test_max_pairs(make_ctx, key512, a, b, want):
    ctx = make_ctx(8)
    ca, cb = enc(ctx, [a, b]).cells
    diff = paillier.hsub(ca, cb, ctx.pk)
    batch, record = server_blind_max_pairs([diff], 20, ctx.pk, ctx.rng, ctx.codec)
    assert all(t > 0 for t in record.taus)
    resp = client_respond(batch.cells, key512[1], Rng(1))
    out = server_unblind_max(resp, record, [cb], ctx.pk, ctx.ctr)
    assert dec(ctx, key512[1], out) == [want]
    assert ctx.ctr.comparisons_count == 1


def test_tournament(make_ctx, key512):
    ctx = make_ctx(9)
    groups = [enc(ctx, [3, -1, 7, 0]).cells, enc(ctx, [5, 5, 5, 5]).cells, enc(ctx, [1, 2, 3]).cells]
    out = max_tournament(groups, 10, ctx)
    assert dec(ctx, key512[1], out) == [7, 5, 3]
    assert ctx.ctr.comparisons_count == 3 + 3 + 2
    assert ctx.ctr.round_trips == 2


def test_maxpool_oracle(make_ctx, key512):
    ctx = make_ctx(10)
    xv = np.random.default_rng(1).integers(-50, 50, (4, 4, 2))
    y = maxpool(enc(ctx, xv), 2, 2, ctx)
    assert y.shape == (2, 2, 2)
    assert decrypt_tensor(y, key512[1], ctx.codec).tolist() == plain.maxpool(xv, 2, 2).ravel().tolist()
    assert ctx.ctr.comparisons_count == 8 * 3
    assert ctx.ctr.round_trips == 2
    ctx2 = make_ctx(11)
    yo = maxpool(enc(ctx2, xv), 3, 1, ctx2)
    assert decrypt_tensor(yo, key512[1], ctx2.codec).tolist() == plain.maxpool(xv, 3, 1).ravel().tolist()
    assert ctx2.ctr.round_trips == 4


def test_maxpool_identity_and_shape_errors(make_ctx, key512):
    ctx = make_ctx(12)
    xv = np.arange(8).reshape(2, 2, 2) - 4
    y = maxpool(enc(ctx, xv), 1, 1, ctx)
    assert decrypt_tensor(y, key512[1], ctx.codec).tolist() == xv.ravel().tolist()
    assert ctx.ctr.round_trips == 0
    with pytest.raises(ShapeError):
        maxpool(enc(ctx, np.zeros((5, 5, 1), dtype=int)), 2, 2, ctx)


def test_fused_relu_maxpool(make_ctx, key512):
    ctx = make_ctx(13)
    y = fused_relu_maxpool(enc(ctx, [[[-5], [-3]], [[-9], [-1]]]), 2, 2, ctx)
    assert decrypt_tensor(y, key512[1], ctx.codec).tolist() == [0]
    assert ctx.ctr.comparisons_count == 4
    assert ctx.ctr.round_trips == 3


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_fused_matches_oracle(make_ctx, key512, seed):
    ctx = make_ctx(seed)
    xv = np.random.default_rng(seed).integers(-100, 100, (4, 4, 1))
    y = fused_relu_maxpool(enc(ctx, xv), 2, 2, ctx)
    want = plain.maxpool(plain.relu(xv), 2, 2).ravel().tolist()
    assert decrypt_tensor(y, key512[1], ctx.codec).tolist() == want


@settings(max_examples=10, deadline=None)
@given(vals=st.lists(st.integers(-2 ** 30, 2 ** 30), min_size=1, max_size=12), seed=st.integers(0, 1000))
def test_relu_property(make_ctx, key512, vals, seed):
    ctx = make_ctx(seed)
    y = relu(enc(ctx, vals), ctx)
    assert decrypt_tensor(y, key512[1], ctx.codec).tolist() == [max(v, 0) for v in vals]
