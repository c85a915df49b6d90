"""Layer set: linear, conv+batchnorm, residual block, projection attention, losses.

Every forward returns ``(out, cache)`` and has a matching backward taking
``(dout, cache)`` and returning ``(dx, param_grads)``. Computations follow the
input dtype (float32 in normal use; float64 when a gradient check runs a
higher-precision shadow), and large reductions always accumulate in float64.

The conv layer fuses batch normalization with the activation applied to the
convolution output *before* normalization:

    pre  = x (*) kernel + bias          per output channel
    out  = (a(pre) - mean) / std * gamma + beta

with `mean`/`std` held as stored constants. All supported activations map 0
to exactly 0, which is what makes whole-row zeroing propagate to an exactly
zero output channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ParameterError, ShapeError
from .tensor import Tensor

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

LEAKY_SLOPE = 0.01
PRELU_SLOPE = 0.25  # fixed, non-trainable


def _relu(x):
    return np.maximum(x, 0)


def _relu_deriv(x):
    return (x > 0).astype(x.dtype)


def _leaky(x):
    return np.where(x > 0, x, x.dtype.type(LEAKY_SLOPE) * x)


def _leaky_deriv(x):
    return np.where(x > 0, x.dtype.type(1.0), x.dtype.type(LEAKY_SLOPE))


def _prelu(x):
    return np.where(x > 0, x, x.dtype.type(PRELU_SLOPE) * x)


def _prelu_deriv(x):
    return np.where(x > 0, x.dtype.type(1.0), x.dtype.type(PRELU_SLOPE))


def _gelu(x):
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype)


def _gelu_deriv(x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return (cdf + x * pdf).astype(x.dtype)


ACTIVATIONS = {
    "relu": (_relu, _relu_deriv),
    "leaky_relu": (_leaky, _leaky_deriv),
    "prelu": (_prelu, _prelu_deriv),
    "gelu": (_gelu, _gelu_deriv),
}

LOSS_KINDS = ("softmax_ce", "mse")


def apply_activation(x: np.ndarray, kind: str) -> np.ndarray:
    return ACTIVATIONS[kind][0](x)


def activation_deriv(x: np.ndarray, kind: str) -> np.ndarray:
    return ACTIVATIONS[kind][1](x)


def _matmul64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated in float64, result in the inputs' dtype."""
    if a.dtype == np.float64 or b.dtype == np.float64:
        return a @ b
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def _param(t: Tensor, dtype) -> np.ndarray:
    return t.data.astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# layer specs


@dataclass
class Linear:
    weight: Tensor  # (m, n)
    bias: Tensor  # (m,)

    def __post_init__(self):
        if self.weight.data.ndim != 2:
            raise ShapeError(f"linear weight must be 2-D, got rank {self.weight.data.ndim}")
        if self.bias.data.shape != (self.weight.data.shape[0],):
            raise ShapeError(
                f"linear bias extent {self.bias.data.shape} does not match "
                f"{self.weight.data.shape[0]} output rows"
            )

    @property
    def out_features(self):
        return self.weight.data.shape[0]

    @property
    def in_features(self):
        return self.weight.data.shape[1]


@dataclass
class ConvBN:
    kernel: Tensor  # (m, in_channels * kh * kw), row c flattened (channel, kh, kw)
    bias: Tensor  # (m,)
    mean: Tensor  # (m,) stored constant
    std: Tensor  # (m,) stored constant, strictly positive
    gamma: Tensor  # (m,)
    beta: Tensor  # (m,)
    in_channels: int
    kh: int
    kw: int
    stride: int = 1
    padding: int = 0
    activation: str = "relu"

    def __post_init__(self):
        m, cols = self.kernel.data.shape
        expected = self.in_channels * self.kh * self.kw
        if cols != expected:
            raise ShapeError(
                f"conv kernel has {cols} columns, expected in_channels*kh*kw = {expected}"
            )
        for name in ("bias", "mean", "std", "gamma", "beta"):
            arr = getattr(self, name).data
            if arr.shape != (m,):
                raise ShapeError(f"conv {name} extent {arr.shape} does not match {m} channels")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation kind {self.activation!r}")
        _check_std(self.std.data)

    @property
    def out_channels(self):
        return self.kernel.data.shape[0]


@dataclass
class ResidualBlock:
    branch1: ConvBN
    branch2: ConvBN


@dataclass
class MultiHeadAttention:
    """Projection-only attention: per head ``w_h @ x + b_h``, outputs concatenated."""

    weights: list[Tensor] = field(default_factory=list)  # per head (m_h, n)
    biases: list[Tensor] = field(default_factory=list)  # per head (m_h,)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("attention needs one (weight, bias) pair per head")
        n = self.weights[0].data.shape[1]
        for h, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.data.ndim != 2 or w.data.shape[1] != n:
                raise ShapeError(f"attention head {h} input extent differs from shared {n}")
            if b.data.shape != (w.data.shape[0],):
                raise ShapeError(
                    f"attention head {h} output extent {w.data.shape[0]} inconsistent "
                    f"with bias extent {b.data.shape}"
                )

    @property
    def n_heads(self):
        return len(self.weights)

    @property
    def head_dims(self):
        return [w.data.shape[0] for w in self.weights]

    @property
    def in_features(self):
        return self.weights[0].data.shape[1]

    @property
    def out_features(self):
        return sum(self.head_dims)


@dataclass
class Activation:
    kind: str

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ParameterError(f"unknown activation kind {self.kind!r}")


@dataclass
class Loss:
    kind: str

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ParameterError(f"unknown loss kind {self.kind!r}")


LayerSpec = Linear | ConvBN | ResidualBlock | MultiHeadAttention | Activation | Loss


def param_entries(layer) -> list[tuple[str, Tensor, bool]]:
    """(name, tensor, trainable) triples for a layer, in a stable order."""
    if isinstance(layer, Linear):
        return [("weight", layer.weight, True), ("bias", layer.bias, True)]
    if isinstance(layer, ConvBN):
        return [
            ("kernel", layer.kernel, True),
            ("bias", layer.bias, True),
            ("gamma", layer.gamma, True),
            ("beta", layer.beta, True),
            ("mean", layer.mean, False),
            ("std", layer.std, False),
        ]
    if isinstance(layer, ResidualBlock):
        out = []
        for tag, branch in (("b1", layer.branch1), ("b2", layer.branch2)):
            out.extend((f"{tag}.{n}", t, tr) for n, t, tr in param_entries(branch))
        return out
    if isinstance(layer, MultiHeadAttention):
        out = []
        for h, (w, b) in enumerate(zip(layer.weights, layer.biases)):
            out.append((f"h{h}.weight", w, True))
            out.append((f"h{h}.bias", b, True))
        return out
    return []


def _check_std(std: np.ndarray):
    if np.any(std <= 0):
        bad = int(np.argmax(std <= 0))
        raise ParameterError(f"BN std entry {bad} is {std[bad]!r}; entries must be > 0")


# ---------------------------------------------------------------------------
# linear / attention


def linear_forward(x: np.ndarray, layer: Linear):
    if x.shape[-1] != layer.in_features:
        raise ShapeError(
            f"linear input last extent {x.shape[-1]} does not match weight columns "
            f"{layer.in_features}"
        )
    w = _param(layer.weight, x.dtype)
    b = _param(layer.bias, x.dtype)
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1])
    out = _matmul64(x2, w.T) + b
    return out.reshape(*lead, layer.out_features), (x2, lead)


def linear_backward(dout: np.ndarray, layer: Linear, cache):
    x2, lead = cache
    d2 = dout.reshape(-1, layer.out_features)
    w = _param(layer.weight, d2.dtype)
    dw = _matmul64(d2.T, x2)
    db = d2.sum(axis=0, dtype=np.float64).astype(d2.dtype)
    dx = _matmul64(d2, w).reshape(*lead, layer.in_features)
    return dx, {"weight": dw, "bias": db}


def attention_forward(x: np.ndarray, layer: MultiHeadAttention):
    if x.shape[-1] != layer.in_features:
        raise ShapeError(
            f"attention input last extent {x.shape[-1]} does not match shared head "
            f"input extent {layer.in_features}"
        )
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1])
    outs = []
    for w, b in zip(layer.weights, layer.biases):
        outs.append(_matmul64(x2, _param(w, x.dtype).T) + _param(b, x.dtype))
    out = np.concatenate(outs, axis=1)
    return out.reshape(*lead, layer.out_features), (x2, lead)


def attention_backward(dout: np.ndarray, layer: MultiHeadAttention, cache):
    x2, lead = cache
    d2 = dout.reshape(-1, layer.out_features)
    grads = {}
    dx = np.zeros_like(x2)
    offset = 0
    for h, (w, b) in enumerate(zip(layer.weights, layer.biases)):
        m_h = w.data.shape[0]
        dh = d2[:, offset : offset + m_h]
        grads[f"h{h}.weight"] = _matmul64(dh.T, x2)
        grads[f"h{h}.bias"] = dh.sum(axis=0, dtype=np.float64).astype(d2.dtype)
        dx += _matmul64(dh, _param(w, d2.dtype))
        offset += m_h
    return dx.reshape(*lead, layer.in_features), grads


# ---------------------------------------------------------------------------
# conv + bn


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """(B, C, H, W) -> (B, oh, ow, C*kh*kw) patches, channel-major rows."""
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B, C, oh, ow, kh, kw)
    oh, ow = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh, ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int):
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = np.zeros((b, c, hp, wp), dtype=dcols.dtype)
    _, oh, ow, _ = dcols.shape
    d6 = dcols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += d6[
                :, :, :, :, i, j
            ]
    if padding:
        return dxp[:, :, padding : padding + h, padding : padding + w]
    return dxp


def conv_output_hw(h: int, w: int, layer: ConvBN) -> tuple[int, int]:
    oh = (h + 2 * layer.padding - layer.kh) // layer.stride + 1
    ow = (w + 2 * layer.padding - layer.kw) // layer.stride + 1
    return oh, ow


def conv_bn_forward(x: np.ndarray, layer: ConvBN):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be (batch, c, h, w); got rank {x.ndim}")
    if x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"conv input channel extent {x.shape[1]} does not match kernel "
            f"in_channels {layer.in_channels}"
        )
    oh, ow = conv_output_hw(x.shape[2], x.shape[3], layer)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv output spatial extent ({oh}, {ow}) is empty for input "
            f"{x.shape[2]}x{x.shape[3]}"
        )
    _check_std(layer.std.data)
    dtype = x.dtype
    k = _param(layer.kernel, dtype)
    cols, oh, ow = _im2col(x, layer.kh, layer.kw, layer.stride, layer.padding)
    pre = _matmul64(cols.reshape(-1, k.shape[1]), k.T) + _param(layer.bias, dtype)
    pre = pre.reshape(x.shape[0], oh, ow, layer.out_channels).transpose(0, 3, 1, 2)
    act = apply_activation(pre, layer.activation)
    mean = _param(layer.mean, dtype)[None, :, None, None]
    std = _param(layer.std, dtype)[None, :, None, None]
    gamma = _param(layer.gamma, dtype)[None, :, None, None]
    beta = _param(layer.beta, dtype)[None, :, None, None]
    out = (act - mean) / std * gamma + beta
    return out, (x.shape, cols, pre, act)


def conv_bn_backward(dout: np.ndarray, layer: ConvBN, cache):
    x_shape, cols, pre, act = cache
    dtype = dout.dtype
    std = _param(layer.std, dtype)[None, :, None, None]
    gamma = _param(layer.gamma, dtype)[None, :, None, None]
    mean = _param(layer.mean, dtype)[None, :, None, None]

    dgamma = ((act - mean) / std * dout).sum(axis=(0, 2, 3), dtype=np.float64).astype(dtype)
    dbeta = dout.sum(axis=(0, 2, 3), dtype=np.float64).astype(dtype)
    dact = dout * gamma / std
    dpre = dact * activation_deriv(pre, layer.activation)

    b, m = dpre.shape[0], layer.out_channels
    dpre2 = dpre.transpose(0, 2, 3, 1).reshape(-1, m)
    db = dpre2.sum(axis=0, dtype=np.float64).astype(dtype)
    cols2 = cols.reshape(-1, cols.shape[-1])
    dk = _matmul64(dpre2.T, cols2)
    dcols = _matmul64(dpre2, _param(layer.kernel, dtype)).reshape(cols.shape)
    dx = _col2im(dcols, x_shape, layer.kh, layer.kw, layer.stride, layer.padding)
    return dx, {"kernel": dk, "bias": db, "gamma": dgamma, "beta": dbeta}


def residual_forward(x: np.ndarray, layer: ResidualBlock):
    out1, cache1 = conv_bn_forward(x, layer.branch1)
    out2, cache2 = conv_bn_forward(x, layer.branch2)
    if out1.shape != out2.shape:
        raise ShapeError(
            f"residual branch outputs disagree: {out1.shape} vs {out2.shape}"
        )
    return out1 + out2, (cache1, cache2)


def residual_backward(dout: np.ndarray, layer: ResidualBlock, cache):
    cache1, cache2 = cache
    dx1, g1 = conv_bn_backward(dout, layer.branch1, cache1)
    dx2, g2 = conv_bn_backward(dout, layer.branch2, cache2)
    grads = {f"b1.{k}": v for k, v in g1.items()}
    grads.update({f"b2.{k}": v for k, v in g2.items()})
    return dx1 + dx2, grads


def activation_forward(x: np.ndarray, layer: Activation):
    return apply_activation(x, layer.kind), x


def activation_backward(dout: np.ndarray, layer: Activation, cache):
    return dout * activation_deriv(cache, layer.kind), {}


# ---------------------------------------------------------------------------
# losses


def loss_forward(out: np.ndarray, targets: np.ndarray, kind: str):
    """Mean per-sample loss and its gradient with respect to `out`.

    softmax_ce expects integer class targets; mse expects targets shaped
    like `out` and uses the per-sample sum of squared errors.
    """
    if out.ndim != 2:
        raise ShapeError(f"loss input must be 2-D (batch, features); got rank {out.ndim}")
    batch = out.shape[0]
    if kind == "softmax_ce":
        y = np.asarray(targets)
        if y.shape != (batch,):
            raise ShapeError(f"class targets must have shape ({batch},); got {y.shape}")
        y = y.astype(np.int64)
        shifted = out.astype(np.float64) - out.max(axis=1, keepdims=True)
        expv = np.exp(shifted)
        total = expv.sum(axis=1, keepdims=True)
        logp = shifted - np.log(total)
        loss = float(-logp[np.arange(batch), y].mean())
        probs = expv / total
        dout = probs
        dout[np.arange(batch), y] -= 1.0
        dout /= batch
        return loss, dout.astype(out.dtype)
    if kind == "mse":
        y = np.asarray(targets, dtype=out.dtype)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        if y.shape != out.shape:
            raise ShapeError(f"mse targets shape {y.shape} does not match output {out.shape}")
        r = out.astype(np.float64) - y.astype(np.float64)
        loss = float((r * r).sum() / batch)
        dout = (2.0 / batch) * r
        return loss, dout.astype(out.dtype)
    raise ParameterError(f"unknown loss kind {kind!r}")
