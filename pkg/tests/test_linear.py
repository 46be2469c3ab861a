import numpy as np
import pytest

from popcorn import paillier, plain
from popcorn.compress import Binary, DenseInt, LayerSpec, quantize_codebook
from popcorn.encoding import PlainTensor, SignedCodec, decrypt_tensor, encrypt_tensor
from popcorn.linear import (LinearContext, OpCounter, eval_binarized, eval_binarized_naive, eval_conv,
                            eval_fc, eval_pair_diff, naive_pair_diff, padded_cells, plan_conv_diffs)
from popcorn.rng import Rng


@pytest.fixture
def env(key512):
    pk, sk = key512
    rng = Rng(11)
    ctx = LinearContext(pk, OpCounter(), paillier.encrypt(1, pk, rng), rng)
    return pk, sk, ctx


def enc(pk, values, rng=None):
    return encrypt_tensor(PlainTensor(np.asarray(values, dtype=object)), pk, rng or Rng(0))


def test_fc_identity(env):
    pk, sk, ctx = env
    x = enc(pk, [3, -4, 5])
    y = eval_fc(x, DenseInt(np.eye(3, dtype=np.int64)), np.zeros(3, dtype=np.int64), ctx)
    assert decrypt_tensor(y, sk).tolist() == [3, -4, 5]


def test_fc_random_matches_matvec(env):
    pk, sk, ctx = env
    r = np.random.default_rng(5)
    W, b, xv = r.integers(-50, 50, (8, 6)), r.integers(-9, 9, 8), r.integers(-100, 100, 6)
    y = eval_fc(enc(pk, xv), DenseInt(W), b, ctx)
    assert decrypt_tensor(y, sk).tolist() == plain.fc(xv, W, b).tolist()
    assert ctx.ctr.hmul_plain_count == 48
    assert ctx.ctr.bias_hmul_count == len({int(v) for v in b if v})


def test_conv_examples(env):
    pk, sk, ctx = env
    r = np.random.default_rng(6)
    xv = r.integers(-20, 20, (5, 5, 1))
    x = enc(pk, xv)
    one = eval_conv(x, DenseInt(np.ones((1, 1, 1, 1))), None, LayerSpec("conv", (5, 5, 1), (1, 1, 1), 1), ctx)
    assert decrypt_tensor(one, sk).tolist() == xv.ravel().tolist()
    W = r.integers(-5, 5, (2, 3, 3, 1))
    spec = LayerSpec("conv", (5, 5, 1), (3, 3, 1), 2, 1, 1)
    y = eval_conv(x, DenseInt(W), np.array([2, -1]), spec, ctx)
    assert decrypt_tensor(y, sk).tolist() == plain.conv(xv, W, [2, -1], 1, 1).ravel().tolist()
    spec2 = LayerSpec("conv", (5, 5, 1), (3, 3, 1), 2, 2, 0)
    y2 = eval_conv(x, DenseInt(W), None, spec2, ctx)
    assert decrypt_tensor(y2, sk).tolist() == plain.conv(xv, W, None, 2, 0).ravel().tolist()


def test_pruned_all_zero_filter_costs_nothing(env):
    pk, sk, ctx = env
    spec = LayerSpec("conv", (4, 4, 1), (3, 3, 1), 1)
    w = np.zeros((1, 3, 3, 1))
    cb = quantize_codebook(w, np.zeros_like(w, dtype=bool), 2)
    y = eval_conv(enc(pk, np.ones((4, 4, 1), dtype=int)), cb, None, spec, ctx)
    assert ctx.ctr.hmul_plain_count == 0
    assert decrypt_tensor(y, sk).tolist() == [0] * 4


def test_codebook_reuse_bound(env):
    pk, sk, ctx = env
    r = np.random.default_rng(8)
    w = r.normal(size=(64, 12))
    cb = quantize_codebook(w, np.ones_like(w, dtype=bool), 2, 6)
    xv = r.integers(-30, 30, 12)
    y = eval_fc(enc(pk, xv), cb, None, ctx)
    assert ctx.ctr.hmul_plain_count <= 12 * 4
    assert decrypt_tensor(y, sk).tolist() == plain.fc(xv, cb.dense(), None).tolist()


def test_binarized_all_plus_is_sum(env):
    pk, sk, ctx = env
    xv = np.arange(9).reshape(3, 3, 1) - 4
    spec = LayerSpec("conv", (3, 3, 1), (3, 3, 1), 1)
    y = eval_binarized(enc(pk, xv), Binary(np.ones((1, 3, 3, 1), dtype=bool)), spec, ctx)
    assert decrypt_tensor(y, sk).tolist() == [int(xv.sum())]


def test_binarized_matches_oracle_and_halves(env):
    pk, sk, ctx = env
    r = np.random.default_rng(9)
    xv = r.integers(-50, 50, (5, 5, 2))
    signs = r.random((16, 3, 3, 2)) < 0.5
    spec = LayerSpec("conv", (5, 5, 2), (3, 3, 2), 16)
    x = enc(pk, xv)
    y = eval_binarized(x, Binary(signs), spec, ctx)
    want = plain.conv(xv, np.where(signs, 1, -1), None).ravel().tolist()
    assert decrypt_tensor(y, sk).tolist() == want
    assert ctx.ctr.hmul_plain_count == 0
    naive_ctx = LinearContext(pk, OpCounter(), ctx.one, Rng(1))
    yn = eval_binarized_naive(x, Binary(signs), spec, naive_ctx)
    assert decrypt_tensor(yn, sk).tolist() == want
    assert ctx.ctr.hadd_count <= naive_ctx.ctr.hadd_count


def _increasing_filter(w, c_out=1):
    # strictly increasing along both axes, so no weight delta vanishes
    base = np.add.outer(np.arange(w) * (w + 1), np.arange(w)) + 1
    return np.stack([base * (k + 1) for k in range(c_out)])[..., None].astype(np.int64)


@pytest.mark.parametrize("w,s,saved", [(3, 1, 6), (5, 1, 20), (11, 4, 77)])
def test_pair_diff_counts(env, w, s, saved):
    pk, sk, ctx = env
    size = w + s
    spec = LayerSpec("conv", (size, size, 1), (w, w, 1), 1, s, 0)
    W = DenseInt(_increasing_filter(w))
    plan = plan_conv_diffs(spec, W, 2, 2)
    xv = np.random.default_rng(w).integers(1, 40, (size, size, 1))
    x = enc(pk, xv)
    cells = padded_cells(x, spec, ctx)
    conv = plain.conv(xv, W.dense(), None, s, 0).ravel()
    for pair in plan.pairs[0]:
        fast, slow = OpCounter(), OpCounter()
        ctx.ctr = fast
        d = eval_pair_diff(cells, pair, ctx)
        ctx.ctr = slow
        dn = naive_pair_diff(cells, spec, W, pair.i, pair.j, ctx)
        assert fast.muladd_count == w * w + w * s
        assert slow.muladd_count == 2 * w * w
        assert slow.muladd_count - fast.muladd_count == saved
        assert 1 - fast.muladd_count / slow.muladd_count == pytest.approx(0.5 - s / (2 * w))
        want = int(conv[pair.i] - conv[pair.j])
        codec = SignedCodec.for_key(pk)
        assert codec.decode(paillier.decrypt(d, sk)) == want
        assert codec.decode(paillier.decrypt(dn, sk)) == want


def test_pair_diff_identical_filters_exclusive_only(env):
    pk, sk, ctx = env
    spec = LayerSpec("conv", (3, 4, 1), (3, 3, 1), 1)
    W = DenseInt(np.ones((1, 3, 3, 1), dtype=np.int64))
    plan = plan_conv_diffs(spec, W, 1, 1)
    assert plan.pair_count() == 0
    plan = plan_conv_diffs(LayerSpec("conv", (4, 4, 1), (3, 3, 1), 1), W, 2, 2)
    assert all(len(p.terms) == 6 for p in plan.pairs[0])


def test_no_overlap_no_saving():
    w = 3
    spec = LayerSpec("conv", (w, 2 * w, 1), (w, w, 1), 1, w, 0)
    plan = plan_conv_diffs(spec, DenseInt(_increasing_filter(w)), 1, 1)
    assert plan.pair_count() == 0
    spec = LayerSpec("conv", (2 * w, 2 * w, 1), (w, w, 1), 1, w, 0)
    plan = plan_conv_diffs(spec, DenseInt(_increasing_filter(w)), 2, 2)
    assert all(len(p.terms) == 2 * w * w for p in plan.pairs[0])
