import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from popcorn.compress import (BNParams, Binary, DenseInt, DenseReal, Layer, LayerSpec, Model, PrunedCodebook,
                              binarize, build_model, compress_model, count_hmul, fold_bn, integerize,
                              layer_priority_report, lloyd_1d, model_from_bytes, model_to_bytes,
                              prune_magnitude, quantize_codebook, read_model, receptive_fields, write_model)
from popcorn.errors import FormatError, ShapeError
from popcorn.models import toy_model


def test_fold_bn_identity():
    w = np.random.default_rng(0).normal(size=(3, 4))
    b = np.array([0.1, 0.2, 0.3])
    bn = BNParams(np.ones(3), np.zeros(3), np.zeros(3), np.full(3, 1 - 1e-5))
    w2, b2 = fold_bn(w, b, bn)
    assert np.allclose(w2, w) and np.allclose(b2, b)


def test_fold_bn_centering():
    bn = BNParams(np.ones(2), np.zeros(2), np.array([0.4, -0.7]), np.full(2, 1 - 1e-5))
    _, b2 = fold_bn(np.ones((2, 3)), np.array([0.4, -0.7]), bn)
    assert np.allclose(b2, 0)


def test_fold_bn_matches_pipeline():
    rng = np.random.default_rng(3)
    w, b, x = rng.normal(size=(5, 7)), rng.normal(size=5), rng.normal(size=7)
    bn = BNParams(rng.uniform(0.5, 2, 5), rng.normal(size=5), rng.normal(size=5), rng.uniform(0.5, 2, 5))
    ref = bn.gamma * ((w @ x + b) - bn.mean) / np.sqrt(bn.var + bn.eps) + bn.beta
    w2, b2 = fold_bn(w, b, bn)
    assert np.allclose(w2 @ x + b2, ref, rtol=1e-9, atol=0)


def test_prune_examples():
    mask = prune_magnitude(np.array([0.1, -0.9, 0.05, 0.5]), 0.5)
    assert mask.tolist() == [False, True, False, True]
    assert prune_magnitude(np.ones(5), 0).all()


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 300), ratio=st.floats(0, 0.99))
def test_prune_count(n, ratio):
    w = np.random.default_rng(n).normal(size=n)
    assert prune_magnitude(w, ratio).sum() == n - int(np.floor(ratio * n))


def test_two_means_example():
    centers, labels = lloyd_1d([0.1, 0.11, 0.9, 0.91], 2)
    assert np.allclose(sorted(centers), [0.105, 0.905])  # exhaustive 2-means oracle
    assert labels.tolist() == [0, 0, 1, 1]


def test_codebook_exact_when_enough_bits():
    w = np.array([[0.25, -0.5], [0.25, 0.75]])
    cb = quantize_codebook(w, np.ones_like(w, dtype=bool), bits=2, scale_exp=4)
    assert cb.dense().tolist() == [[4, -8], [4, 12]]
    assert len(cb.codebook) <= 4


def test_codebook_beats_single_codeword():
    w = np.random.default_rng(2).normal(size=200)
    centers, labels = lloyd_1d(w, 4, seed=1)
    mse = np.mean((w - centers[labels]) ** 2)
    assert mse <= np.mean((w - w.mean()) ** 2)


def test_binarize_examples():
    assert binarize([0.3, -0.2]).dense().tolist() == [1, -1]
    assert binarize([0.0]).dense().tolist() == [1]
    w = np.array([0.3, -1.2, 4.0])
    assert (binarize(-w).dense() == -binarize(w).dense()).all()


def test_priority_report():
    desc = {"input_shape": [28, 28, 1], "layers": [
        {"kind": "conv", "filters": 2, "size": 3}, {"kind": "relu"},
        {"kind": "conv", "filters": 2, "size": 3, "stride": 2}, {"kind": "flatten"},
        {"kind": "fc", "out": 5}]}
    report = layer_priority_report(build_model(desc, 0))
    rows = {r.name: r for r in report.layers}
    assert rows["L0:conv"].ciphertexts_per_weight == 784
    assert rows["L4:fc"].weights_per_ciphertext == 5
    assert report.prune_order()[0] == "L0:conv"
    assert report.prune_order().index("L2:conv") < report.prune_order().index("L4:fc")


def test_receptive_fields_padding():
    spec = LayerSpec("conv", (3, 3, 1), (3, 3, 1), 1, 1, 1)
    idx, padded = receptive_fields(spec)
    assert padded == (5, 5, 1) and idx.shape == (9, 9)
    assert idx[0].tolist() == [0, 1, 2, 5, 6, 7, 10, 11, 12]


def test_spec_validation():
    with pytest.raises(ShapeError):
        LayerSpec("maxpool", (5, 5, 1), window=2, stride=2)
    with pytest.raises(ShapeError):
        LayerSpec("conv", (4, 4, 2), (3, 3, 1), 1)


def test_count_hmul_codebook_reuse():
    spec = LayerSpec("fc", (10,), out_channels=64)
    w = np.random.default_rng(0).normal(size=(64, 10))
    cb = quantize_codebook(w, np.ones_like(w, dtype=bool), 2, 8)
    assert count_hmul(spec, cb) <= 10 * 4
    assert count_hmul(spec, integerize(w)) == 640
    assert count_hmul(spec, binarize(w)) == 0


def test_compress_pipeline_variants():
    base = build_model({"input_shape": [6, 6, 1], "layers": [
        {"kind": "conv", "filters": 3, "size": 3, "bn": True}, {"kind": "relu"},
        {"kind": "flatten"}, {"kind": "fc", "out": 4}]}, 1)
    m = compress_model(base, 8, prune=0.5, bits=3)
    assert all(isinstance(l.weights, PrunedCodebook) for l in m.layers if l.kind in ("conv", "fc"))
    assert m.layers[0].bn is None
    assert m.scales() == [16, 16, 16, 24]
    mb = compress_model(base, 8, binarize_weights=True)
    assert all(isinstance(l.weights, Binary) for l in mb.layers if l.kind in ("conv", "fc"))
    with pytest.raises(ValueError):
        compress_model(base, 8, bits=2, binarize_weights=True)


def test_prune_keeps_expected_nonzeros():
    base = build_model({"input_shape": [1000], "layers": [{"kind": "fc", "out": 1}]}, 0)
    m = compress_model(base, 12, prune=0.9, bits=8)
    assert np.count_nonzero(m.layers[0].weights.dense()) <= 100
    assert len(m.layers[0].weights.indices) <= 100


def test_model_format_roundtrip(tmp_path):
    for m in (toy_model("toy-a"), toy_model("toy-b"), toy_model("toy-b", prune=0.5, bits=2),
              toy_model("toy-b", binarize_weights=True)):
        back = model_from_bytes(model_to_bytes(m))
        assert back.input_shape == m.input_shape and back.input_scale == m.input_scale
        for a, b in zip(m.layers, back.layers):
            assert a.spec == b.spec and type(a.weights) is type(b.weights)
            if a.weights is not None:
                assert (a.weights.dense() == b.weights.dense()).all()
                assert (np.asarray(a.bias) == np.asarray(b.bias)).all()
    real = build_model({"input_shape": [4], "layers": [{"kind": "fc", "out": 2}]}, 0)
    write_model(tmp_path / "r.ppmd", real)
    back = read_model(tmp_path / "r.ppmd")
    assert np.allclose(back.layers[0].weights.values, real.layers[0].weights.values)
    with pytest.raises(FormatError):
        model_from_bytes(model_to_bytes(real)[:-2])


def test_model_shape_check():
    spec = LayerSpec("fc", (4,), out_channels=2)
    with pytest.raises(ShapeError):
        Model((5,), [Layer(spec, DenseInt(np.zeros((2, 4))), np.zeros(2))])
