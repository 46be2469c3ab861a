"""Plaintext integer reference evaluation.

Deliberately naive nested loops over Python ints.  The encrypted evaluators
are checked against these, so nothing here shares code with
:mod:`popcorn.linear`.
"""
import numpy as np

from .compress import LINEAR_KINDS, dense_weights


def conv(x, weights, bias, stride=1, padding=0):
    """x: (h, w, c) ints; weights: (c_out, f_h, f_w, c); bias: (c_out,)."""
    x = np.asarray(x, dtype=object)
    h, w, c = x.shape
    c_out, fh, fw, fc = np.shape(weights)
    assert fc == c
    xp = np.zeros((h + 2 * padding, w + 2 * padding, c), dtype=object)
    xp[:] = 0
    xp[padding:padding + h, padding:padding + w, :] = x
    ho = (h + 2 * padding - fh) // stride + 1
    wo = (w + 2 * padding - fw) // stride + 1
    out = np.zeros((ho, wo, c_out), dtype=object)
    for oy in range(ho):
        for ox in range(wo):
            for k in range(c_out):
                acc = 0 if bias is None else int(bias[k])
                for dy in range(fh):
                    for dx in range(fw):
                        for ch in range(c):
                            acc += int(weights[k][dy][dx][ch]) * int(xp[oy * stride + dy, ox * stride + dx, ch])
                out[oy, ox, k] = acc
    return out


def fc(x, weights, bias):
    flat = [int(v) for v in np.asarray(x, dtype=object).ravel()]
    out = []
    for k in range(len(weights)):
        acc = 0 if bias is None else int(bias[k])
        for j, v in enumerate(flat):
            acc += int(weights[k][j]) * v
        out.append(acc)
    return np.array(out, dtype=object)


def relu(x):
    x = np.asarray(x, dtype=object)
    return np.array([max(int(v), 0) for v in x.ravel()], dtype=object).reshape(x.shape)


def maxpool(x, t, s):
    x = np.asarray(x, dtype=object)
    h, w, c = x.shape
    ho, wo = (h - t) // s + 1, (w - t) // s + 1
    out = np.zeros((ho, wo, c), dtype=object)
    for oy in range(ho):
        for ox in range(wo):
            for ch in range(c):
                out[oy, ox, ch] = max(int(x[oy * s + dy, ox * s + dx, ch]) for dy in range(t) for dx in range(t))
    return out


def evaluate(model, x):
    """Run an integerized model on integer input ``x`` at ``model.input_scale``."""
    x = np.asarray(x, dtype=object).reshape(model.input_shape)
    for layer in model.layers:
        spec = layer.spec
        if spec.kind in LINEAR_KINDS:
            W = dense_weights(layer.weights)
            if spec.kind == "conv":
                x = conv(x, W, layer.bias, spec.stride, spec.padding)
            else:
                x = fc(x, W, layer.bias)
        elif spec.kind == "relu":
            x = relu(x)
        elif spec.kind == "maxpool":
            x = maxpool(x, spec.window, spec.stride)
        elif spec.kind == "flatten":
            x = x.ravel()
    return x
