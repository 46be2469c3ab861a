"""Bundled reference networks.

TOY-A: fc 16->8, relu, fc 8->4 on a 16-vector.
TOY-B: conv 3x3x1x4 (padding 1) on 8x8x1, relu, maxpool t=s=2, flatten, fc 64->10.

Weights are random with fixed seeds and integerized at ``scale_exp = 8``.
"""
import numpy as np

from .compress import build_model, compress_model
from .encoding import PlainTensor

TOY_SCALE = 8

TOY_A = {
    "input_shape": [16],
    "layers": [
        {"kind": "fc", "out": 8},
        {"kind": "relu"},
        {"kind": "fc", "out": 4},
    ],
}

TOY_B = {
    "input_shape": [8, 8, 1],
    "layers": [
        {"kind": "conv", "filters": 4, "size": 3, "stride": 1, "padding": 1},
        {"kind": "relu"},
        {"kind": "maxpool", "window": 2, "stride": 2},
        {"kind": "flatten"},
        {"kind": "fc", "out": 10},
    ],
}

TOYS = {"toy-a": (TOY_A, 11), "toy-b": (TOY_B, 12)}


def toy_description(name):
    try:
        return TOYS[name.lower()][0]
    except KeyError:
        raise ValueError(f"unknown toy model {name!r}; choose from {sorted(TOYS)}") from None


def toy_model(name, scale_exp=TOY_SCALE, **compress_opts):
    """Integerized reference model; ``compress_opts`` go to :func:`compress_model`."""
    desc, seed = TOYS[name.lower()] if name.lower() in TOYS else (toy_description(name), 0)
    return compress_model(build_model(desc, seed), scale_exp, seed=seed, **compress_opts)


def toy_input(model, seed=0, low=-1.0, high=1.0):
    """Uniform real input in ``[low, high)`` quantized at the model's input scale."""
    x = np.random.default_rng(seed).uniform(low, high, model.input_shape)
    return PlainTensor.from_real(x, model.input_scale)
