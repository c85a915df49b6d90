"""Shared test utilities: random architecture generation and reference oracles."""

import numpy as np

from zigprune.config import build_layers
from zigprune.model import ModelGraph

ACT_KINDS = ("relu", "leaky_relu", "prelu", "gelu")


def random_architecture(rng, conv_ok=True, mha_ok=True):
    """A small random layer-spec list, its input shape, and a loss kind."""
    specs = []
    if conv_ok and rng.random() < 0.55:
        c = int(rng.integers(1, 4))
        hw = int(rng.integers(4, 7))
        input_shape = (c, hw, hw)
        for _ in range(int(rng.integers(1, 3))):
            m = int(rng.integers(2, 7))
            k = int(rng.choice([1, 3]))
            pad = 1 if k == 3 else 0
            act = str(rng.choice(ACT_KINDS))
            kind = "residual" if rng.random() < 0.4 else "convbn"
            specs.append(f"{kind}:{m}:{k}x{k}:s1:p{pad}:{act}")
    else:
        input_shape = (int(rng.integers(3, 9)),)
    if mha_ok and rng.random() < 0.4:
        heads = int(rng.integers(1, 3))
        rows = int(rng.integers(2, 5))
        specs.append(f"mha:{heads}x{rows}")
        specs.append(str(rng.choice(ACT_KINDS)))
    for _ in range(int(rng.integers(0, 3))):
        specs.append(f"linear:{int(rng.integers(3, 9))}")
        specs.append(str(rng.choice(ACT_KINDS)))
    specs.append(f"linear:{int(rng.integers(2, 6))}")
    loss = str(rng.choice(["softmax_ce", "mse"]))
    return specs, input_shape, loss


def build_random_model(rng, init="normal:0.5", **arch_kw) -> ModelGraph:
    specs, input_shape, loss = random_architecture(rng, **arch_kw)
    layers = build_layers(specs, input_shape, loss, init, seed=int(rng.integers(0, 2**31)))
    return ModelGraph(layers, input_shape)


def random_batch(rng, model: ModelGraph, n=3):
    x = rng.standard_normal((n, *model.input_shape)).astype(np.float32)
    out_dim = model.shapes[-1][0]
    if model.loss_kind == "softmax_ce":
        y = rng.integers(0, out_dim, size=n)
    else:
        y = rng.standard_normal((n, out_dim)).astype(np.float32)
    return x, y


# -- independent reference implementations (kept deliberately naive) --------


def conv_bn_oracle(x, layer):
    """Nested-loop conv + activation + normalization, no shared code paths."""
    from zigprune.layers import apply_activation

    b, c, h, w = x.shape
    kh, kw, stride, pad = layer.kh, layer.kw, layer.stride, layer.padding
    m = layer.kernel.data.shape[0]
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    kernel = layer.kernel.data.astype(np.float64).reshape(m, c, kh, kw)
    out = np.zeros((b, m, oh, ow), dtype=np.float64)
    for bi in range(b):
        for mi in range(m):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (
                                    xp[bi, ci, oi * stride + ki, oj * stride + kj]
                                    * kernel[mi, ci, ki, kj]
                                )
                    out[bi, mi, oi, oj] = acc + float(layer.bias.data[mi])
    act = apply_activation(out, layer.activation)
    mean = layer.mean.data.astype(np.float64)[None, :, None, None]
    std = layer.std.data.astype(np.float64)[None, :, None, None]
    gamma = layer.gamma.data.astype(np.float64)[None, :, None, None]
    beta = layer.beta.data.astype(np.float64)[None, :, None, None]
    return (act - mean) / std * gamma + beta


def linear_oracle(x2d, weight, bias):
    """Row-by-row dot products."""
    n_out = weight.shape[0]
    out = np.zeros((x2d.shape[0], n_out), dtype=np.float64)
    for i in range(x2d.shape[0]):
        for j in range(n_out):
            out[i, j] = float(np.dot(weight[j].astype(np.float64), x2d[i].astype(np.float64)))
            out[i, j] += float(bias[j])
    return out


def attention_oracle(x2d, layer):
    outs = [
        linear_oracle(x2d, w.data, b.data) for w, b in zip(layer.weights, layer.biases)
    ]
    return np.concatenate(outs, axis=1)
