"""Ordered-layer model: validation, forward/backward, flat parameter view.

A model is an ordered list of layer specs plus a sample input shape. Values
flow through the layers in order; residual blocks sum their two branch
outputs; a trailing ``Loss`` layer turns targets into a scalar objective.
A value with spatial structure is flattened (batch, -1) before it enters a
linear, attention or loss layer.

Parameter arrays live in a registry keyed by stable ids (``L3.kernel``,
``L5.b1.gamma``, ``L7.h0.weight``); the flattened view used by the
optimizers concatenates the trainable arrays in registry order. BN mean/std
are stored constants and are not part of the flat view.
"""

from __future__ import annotations

import copy

import numpy as np

from . import layers as L
from .errors import InvalidModelError, ParameterError, ShapeError, StateError
from .tensor import Tensor, as_array, load_arrays, save_arrays

_FLAT_KINDS = (L.Linear, L.MultiHeadAttention, L.Loss)


def _flat_size(shape) -> int:
    return int(np.prod(shape, dtype=np.int64))


def infer_shapes(layer_list, input_shape) -> list[tuple]:
    """Per-layer output sample shapes; raises if adjacent layers disagree."""
    shape = tuple(int(s) for s in input_shape)
    shapes = []
    for i, layer in enumerate(layer_list):
        if isinstance(layer, L.Loss):
            if i != len(layer_list) - 1:
                raise InvalidModelError(f"layer {i}: loss layer must be last")
            if len(shape) > 1:
                shape = (_flat_size(shape),)
        elif isinstance(layer, (L.Linear, L.MultiHeadAttention)):
            if len(shape) > 1:
                shape = (_flat_size(shape),)
            expected = layer.in_features
            if shape[0] != expected:
                raise InvalidModelError(
                    f"layer {i}: input extent {shape[0]} does not match expected {expected}"
                )
            shape = (layer.out_features,)
        elif isinstance(layer, L.ConvBN):
            if len(shape) != 3:
                raise InvalidModelError(
                    f"layer {i}: conv needs a (channels, h, w) input, got {shape}"
                )
            if shape[0] != layer.in_channels:
                raise InvalidModelError(
                    f"layer {i}: input channel extent {shape[0]} does not match "
                    f"kernel in_channels {layer.in_channels}"
                )
            oh, ow = L.conv_output_hw(shape[1], shape[2], layer)
            if oh < 1 or ow < 1:
                raise InvalidModelError(f"layer {i}: empty conv output for input {shape}")
            shape = (layer.out_channels, oh, ow)
        elif isinstance(layer, L.ResidualBlock):
            sub = [None, None]
            for b, branch in enumerate((layer.branch1, layer.branch2)):
                sub[b] = infer_shapes([branch], shape)[0]
            if sub[0] != sub[1]:
                raise InvalidModelError(
                    f"layer {i}: residual branch outputs disagree: {sub[0]} vs {sub[1]}"
                )
            if layer.branch1.out_channels != layer.branch2.out_channels:
                raise InvalidModelError(
                    f"layer {i}: residual branch channel counts differ: "
                    f"{layer.branch1.out_channels} vs {layer.branch2.out_channels}"
                )
            shape = sub[0]
        elif isinstance(layer, L.Activation):
            pass
        else:
            raise InvalidModelError(f"layer {i}: unknown layer kind {type(layer).__name__}")
        shapes.append(shape)
    return shapes


class ModelGraph:
    def __init__(self, layer_list, input_shape):
        self.layers = list(layer_list)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = infer_shapes(self.layers, self.input_shape)
        self.params: dict[str, Tensor] = {}
        self.constants: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            for name, tensor, trainable in L.param_entries(layer):
                key = f"L{i}.{name}"
                if trainable:
                    tensor.ensure_grad()
                    self.params[key] = tensor
                else:
                    self.constants[key] = tensor
        self._offsets: dict[str, tuple[int, int]] = {}
        pos = 0
        for key, tensor in self.params.items():
            self._offsets[key] = (pos, pos + tensor.size)
            pos += tensor.size
        self.n_flat = pos
        self._tape = None
        self._layer_outputs = None

    # -- structure ---------------------------------------------------------

    @property
    def loss_kind(self) -> str | None:
        if self.layers and isinstance(self.layers[-1], L.Loss):
            return self.layers[-1].kind
        return None

    def param_offsets(self) -> dict[str, tuple[int, int]]:
        return dict(self._offsets)

    def clone(self) -> "ModelGraph":
        return copy.deepcopy(self)

    # -- flat parameter view -------------------------------------------------

    def get_flat(self) -> np.ndarray:
        out = np.empty(self.n_flat, dtype=np.float32)
        for key, (start, stop) in self._offsets.items():
            out[start:stop] = self.params[key].data.ravel()
        return out

    def set_flat(self, x: np.ndarray):
        if x.shape != (self.n_flat,):
            raise ShapeError(f"flat view has {self.n_flat} entries, got {x.shape}")
        for key, (start, stop) in self._offsets.items():
            t = self.params[key]
            t.data[...] = x[start:stop].reshape(t.shape).astype(np.float32)

    def get_flat_grad(self) -> np.ndarray:
        out = np.empty(self.n_flat, dtype=np.float32)
        for key, (start, stop) in self._offsets.items():
            out[start:stop] = self.params[key].grad.ravel()
        return out

    # -- execution -----------------------------------------------------------

    def forward(self, inputs, targets=None):
        """Run the layers in order; returns (output, loss-or-None).

        Records the intermediates needed by backward() and the per-layer
        outputs used by the zero-invariance checker.
        """
        x = as_array(inputs)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"input sample shape {x.shape[1:]} does not match model input "
                f"{self.input_shape}"
            )
        tape = []
        outputs = []
        loss = None
        dloss = None
        for i, layer in enumerate(self.layers):
            pre_flatten = None
            if isinstance(layer, _FLAT_KINDS) and x.ndim > 2:
                pre_flatten = x.shape
                x = x.reshape(x.shape[0], -1)
            try:
                if isinstance(layer, L.Linear):
                    x, cache = L.linear_forward(x, layer)
                elif isinstance(layer, L.ConvBN):
                    x, cache = L.conv_bn_forward(x, layer)
                elif isinstance(layer, L.ResidualBlock):
                    x, cache = L.residual_forward(x, layer)
                elif isinstance(layer, L.MultiHeadAttention):
                    x, cache = L.attention_forward(x, layer)
                elif isinstance(layer, L.Activation):
                    x, cache = L.activation_forward(x, layer)
                elif isinstance(layer, L.Loss):
                    cache = None
                    if targets is not None:
                        loss, dloss = L.loss_forward(x, targets, layer.kind)
                else:
                    raise InvalidModelError(f"unknown layer kind {type(layer).__name__}")
            except (ShapeError, ParameterError) as exc:
                raise type(exc)(f"layer {i}: {exc}") from exc
            tape.append((i, layer, cache, pre_flatten))
            outputs.append(x)
        self._tape = tape
        self._layer_outputs = outputs
        self._dloss = dloss
        return x, loss

    def layer_outputs(self) -> list[np.ndarray]:
        if self._layer_outputs is None:
            raise StateError("layer_outputs requested before any forward pass")
        return self._layer_outputs

    def backward(self, adjoint: float = 1.0) -> dict[str, np.ndarray]:
        """Backpropagate from the recorded loss; fills grads, returns them by id."""
        if self._tape is None:
            raise StateError("backward called before forward")
        if self._dloss is None:
            raise StateError("backward needs a forward pass that computed a loss")
        for t in self.params.values():
            t.zero_grad()
        grads: dict[str, np.ndarray] = {}
        d = self._dloss if adjoint == 1.0 else self._dloss * adjoint
        for i, layer, cache, pre_flatten in reversed(self._tape):
            if isinstance(layer, L.Loss):
                pass
            elif isinstance(layer, L.Linear):
                d, g = L.linear_backward(d, layer, cache)
            elif isinstance(layer, L.ConvBN):
                d, g = L.conv_bn_backward(d, layer, cache)
            elif isinstance(layer, L.ResidualBlock):
                d, g = L.residual_backward(d, layer, cache)
            elif isinstance(layer, L.MultiHeadAttention):
                d, g = L.attention_backward(d, layer, cache)
            elif isinstance(layer, L.Activation):
                d, g = L.activation_backward(d, layer, cache)
            if not isinstance(layer, L.Loss):
                for name, grad in g.items():
                    key = f"L{i}.{name}"
                    grads[key] = grad
                    self.params[key].grad[...] = grad.astype(np.float32)
            if pre_flatten is not None:
                d = d.reshape(pre_flatten)
        for key in self.params:
            if key not in grads:
                grads[key] = np.zeros(self.params[key].shape, dtype=np.float32)
        return grads

    # -- persistence ---------------------------------------------------------

    def all_arrays(self) -> dict[str, np.ndarray]:
        out = {key: t.data for key, t in self.params.items()}
        out.update({key: t.data for key, t in self.constants.items()})
        return out

    def save_checkpoint(self, path):
        save_arrays(path, self.all_arrays())

    def load_checkpoint(self, path):
        arrays = load_arrays(path)
        own = {**self.params, **self.constants}
        for key, tensor in own.items():
            if key not in arrays:
                raise ShapeError(f"checkpoint is missing array {key}")
            if arrays[key].shape != tensor.shape:
                raise ShapeError(
                    f"checkpoint array {key} has shape {arrays[key].shape}, "
                    f"model expects {tensor.shape}"
                )
            tensor.data[...] = arrays[key]
        extra = set(arrays) - set(own)
        if extra:
            raise ShapeError(f"checkpoint has unknown arrays: {sorted(extra)}")


def _kink_pattern(model: ModelGraph) -> list[np.ndarray]:
    """Sign pattern of every kinked (relu-family) pre-activation of the last forward."""
    pats = []
    for _, layer, cache, _ in model._tape:
        if isinstance(layer, L.ConvBN) and layer.activation != "gelu":
            pats.append(cache[2] > 0)
        elif isinstance(layer, L.ResidualBlock):
            for branch, sub in zip((layer.branch1, layer.branch2), cache):
                if branch.activation != "gelu":
                    pats.append(sub[2] > 0)
        elif isinstance(layer, L.Activation) and layer.kind != "gelu":
            pats.append(cache > 0)
    return pats


def finite_difference_check(model: ModelGraph, inputs, targets, h: float = 1e-3) -> float:
    """Max relative gap between backprop and central differences over all parameters.

    The check runs a float64 shadow of the model (parameters stay float32 in
    storage; the perturbed values are measured after rounding) so the
    difference quotient is an adequate oracle for the analytic gradient.
    Parameters whose +/-h perturbation flips a relu-family activation sign
    are skipped: across a kink the difference quotient measures a slope
    average, not the derivative.
    """
    if h <= 0:
        raise ParameterError(f"finite difference step must be > 0, got {h}")
    x64 = as_array(inputs).astype(np.float64)
    model.forward(x64, targets)
    grads = model.backward()
    worst = 0.0
    for key, tensor in model.params.items():
        flat = tensor.data.ravel()
        gflat = np.asarray(grads[key], dtype=np.float64).ravel()
        for idx in range(flat.size):
            v = flat[idx]
            hi = np.float32(v + h)
            lo = np.float32(v - h)
            denom = float(hi) - float(lo)
            if denom == 0.0:
                continue
            flat[idx] = hi
            loss_hi = model.forward(x64, targets)[1]
            pat_hi = _kink_pattern(model)
            flat[idx] = lo
            loss_lo = model.forward(x64, targets)[1]
            pat_lo = _kink_pattern(model)
            flat[idx] = v
            if not all(np.array_equal(a, b) for a, b in zip(pat_hi, pat_lo)):
                continue
            fd = (loss_hi - loss_lo) / denom
            rel = abs(gflat[idx] - fd) / (abs(fd) + 1e-8)
            worst = max(worst, rel)
    return worst
