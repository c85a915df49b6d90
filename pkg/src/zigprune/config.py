"""Experiment configuration: flat dotted-key text files, model/dataset builders.

Config files hold one `section.key = value` pair per line, `#` comments
allowed. A compact layer DSL describes architectures:

    linear:64                 fully connected, 64 rows
    convbn:8:3x3:s1:p1:relu   8 output channels, 3x3 kernel, stride/pad/act
    residual:8:3x3:s1:p1:relu two conv+bn branches with that shape, summed
    mha:2x4                   2 heads x 4 rows (or per-head list: mha:4,3)
    relu | leaky_relu | prelu | gelu

The loss layer is appended from `model.loss`. Every numeric range is
validated at load time, before any compute starts.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import ConfigError, ParameterError, ZigPruneError
from .hspg import OPTIMIZER_KINDS, TrainConfig
from .model import ModelGraph
from .tensor import Tensor

DATASET_KINDS = ("synthetic-classify", "synthetic-glasso", "idx", "csv")


@dataclass
class ExperimentConfig:
    input_shape: tuple
    layer_specs: list[str]
    loss: str
    init: str = "he"
    model_seed: int = 1
    penalize_output: bool = False
    dataset: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    verify_inputs: int = 100
    keep_one: bool = False
    output_dir: str = "out"


def _parse_value(raw: str, key: str, kind):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def parse_config_text(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        pairs[key] = value.strip()
    return pairs


_KNOWN_KEYS = {
    "model.input_shape": str,
    "model.layers": str,
    "model.loss": str,
    "model.init": str,
    "model.seed": int,
    "model.penalize_output": bool,
    "dataset.kind": str,
    "dataset.samples": int,
    "dataset.test_samples": int,
    "dataset.classes": int,
    "dataset.features": int,
    "dataset.separation": float,
    "dataset.groups": int,
    "dataset.group_size": int,
    "dataset.support": int,
    "dataset.noise": float,
    "dataset.coef_scale": float,
    "dataset.seed": int,
    "dataset.images": str,
    "dataset.labels": str,
    "dataset.path": str,
    "dataset.target": str,
    "optimizer.kind": str,
    "optimizer.alpha0": float,
    "optimizer.decay": float,
    "optimizer.lambda": float,
    "optimizer.epsilon": float,
    "optimizer.np_epochs": int,
    "optimizer.batch": int,
    "optimizer.epochs": int,
    "optimizer.seed": int,
    "prune.verify_inputs": int,
    "prune.keep_one": bool,
    "output.dir": str,
}


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        pairs = parse_config_text(fh.read())
    unknown = set(pairs) - set(_KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    typed = {key: _parse_value(raw, key, _KNOWN_KEYS[key]) for key, raw in pairs.items()}

    def need(key):
        if key not in typed:
            raise ConfigError(f"missing required key {key}")
        return typed[key]

    shape_raw = str(need("model.input_shape"))
    try:
        input_shape = tuple(int(part) for part in shape_raw.split("x"))
    except ValueError as exc:
        raise ConfigError(f"model.input_shape: {exc}") from exc
    if any(s < 1 for s in input_shape) or len(input_shape) not in (1, 3):
        raise ConfigError(
            f"model.input_shape must be F or CxHxW with positive extents, got {shape_raw}"
        )
    layer_specs = [s.strip() for s in str(need("model.layers")).split(",") if s.strip()]
    loss = typed.get("model.loss", "softmax_ce")
    if loss not in L.LOSS_KINDS:
        raise ConfigError(f"model.loss must be one of {L.LOSS_KINDS}, got {loss!r}")
    init = typed.get("model.init", "he")
    _validate_init(init)

    kind = need("dataset.kind")
    if kind not in DATASET_KINDS:
        raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {kind!r}")
    dataset = {k.split(".", 1)[1]: v for k, v in typed.items() if k.startswith("dataset.")}
    _validate_dataset(dataset)

    try:
        train = TrainConfig(
            optimizer=typed.get("optimizer.kind", "hspg"),
            alpha0=typed.get("optimizer.alpha0", 0.1),
            decay=typed.get("optimizer.decay", 1.0),
            lam=typed.get("optimizer.lambda", 0.0),
            epsilon=typed.get("optimizer.epsilon", 0.0),
            np_epochs=typed.get("optimizer.np_epochs", 1),
            batch_size=typed.get("optimizer.batch", 64),
            epochs=typed.get("optimizer.epochs", 0),
            seed=typed.get("optimizer.seed", 0),
        )
    except ParameterError as exc:
        raise ConfigError(f"optimizer: {exc}") from exc
    if train.optimizer not in OPTIMIZER_KINDS:
        raise ConfigError(f"optimizer.kind must be one of {OPTIMIZER_KINDS}")

    verify_inputs = typed.get("prune.verify_inputs", 100)
    if verify_inputs < 1:
        raise ConfigError(f"prune.verify_inputs must be >= 1, got {verify_inputs}")

    cfg = ExperimentConfig(
        input_shape=input_shape,
        layer_specs=layer_specs,
        loss=loss,
        init=init,
        model_seed=typed.get("model.seed", 1),
        penalize_output=typed.get("model.penalize_output", False),
        dataset=dataset,
        train=train,
        verify_inputs=verify_inputs,
        keep_one=typed.get("prune.keep_one", False),
        output_dir=typed.get("output.dir", "out"),
    )
    # fail early on an inconsistent architecture
    probe = build_model(cfg)
    del probe
    return cfg


def _validate_init(init: str):
    if init in ("he", "zeros"):
        return
    if init.startswith("normal:"):
        try:
            sigma = float(init.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"model.init: {exc}") from exc
        if sigma < 0:
            raise ConfigError(f"model.init: normal scale must be >= 0, got {sigma}")
        return
    raise ConfigError(f"model.init must be he, zeros or normal:SIGMA, got {init!r}")


def _validate_dataset(ds: dict):
    kind = ds["kind"]
    positive = {
        "samples": 1,
        "test_samples": 0,
        "classes": 2,
        "features": 1,
        "groups": 1,
        "group_size": 1,
    }
    for key, minimum in positive.items():
        if key in ds and ds[key] < minimum:
            raise ConfigError(f"dataset.{key} must be >= {minimum}, got {ds[key]}")
    for key in ("separation", "noise", "coef_scale"):
        if key in ds and ds[key] < 0:
            raise ConfigError(f"dataset.{key} must be >= 0, got {ds[key]}")
    if kind == "synthetic-glasso":
        for key in ("groups", "group_size", "samples"):
            if key not in ds:
                raise ConfigError(f"dataset.{key} is required for synthetic-glasso")
        if ds.get("support", 0) > ds["groups"]:
            raise ConfigError("dataset.support cannot exceed dataset.groups")
    if kind == "synthetic-classify":
        for key in ("samples", "classes", "features"):
            if key not in ds:
                raise ConfigError(f"dataset.{key} is required for synthetic-classify")
    if kind == "idx":
        for key in ("images", "labels"):
            if key not in ds:
                raise ConfigError(f"dataset.{key} is required for idx datasets")
            if not os.path.exists(ds[key]):
                raise ConfigError(f"dataset.{key}: no such file {ds[key]!r}")
    if kind == "csv":
        if "path" not in ds:
            raise ConfigError("dataset.path is required for csv datasets")
        if not os.path.exists(ds["path"]):
            raise ConfigError(f"dataset.path: no such file {ds['path']!r}")
        if ds.get("target", "class") not in ("class", "value"):
            raise ConfigError("dataset.target must be 'class' or 'value'")


# ---------------------------------------------------------------------------
# model building


def _init_weight(rng, shape, fan_in: int, init: str) -> np.ndarray:
    if init == "zeros":
        return np.zeros(shape, dtype=np.float32)
    if init == "he":
        std = np.sqrt(2.0 / max(fan_in, 1))
        return (std * rng.standard_normal(shape)).astype(np.float32)
    sigma = float(init.split(":", 1)[1])
    return (sigma * rng.standard_normal(shape)).astype(np.float32)


def _spec_int(spec: str, text: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"layer {spec!r}: {exc}") from exc


def _parse_conv_spec(spec: str, parts: list[str]):
    if len(parts) < 2 or "x" not in parts[1]:
        raise ConfigError(f"layer {spec!r}: expected OUT and KHxKW")
    out_channels = _spec_int(spec, parts[0])
    kh, kw = (_spec_int(spec, v) for v in parts[1].split("x"))
    stride, padding, act = 1, 0, "relu"
    for extra in parts[2:]:
        if extra in L.ACTIVATIONS:
            act = extra
        elif extra.startswith("s") and extra[1:].isdigit():
            stride = int(extra[1:])
        elif extra.startswith("p") and extra[1:].isdigit():
            padding = int(extra[1:])
        else:
            raise ConfigError(f"layer {spec!r}: unknown option {extra!r}")
    if out_channels < 1 or kh < 1 or kw < 1 or stride < 1 or padding < 0:
        raise ConfigError(f"layer {spec!r}: extents must be positive")
    return out_channels, kh, kw, stride, padding, act


def _make_convbn(rng, in_channels, out_channels, kh, kw, stride, padding, act, init):
    fan_in = in_channels * kh * kw
    return L.ConvBN(
        kernel=Tensor(_init_weight(rng, (out_channels, fan_in), fan_in, init)),
        bias=Tensor(np.zeros(out_channels, dtype=np.float32)),
        mean=Tensor(np.zeros(out_channels, dtype=np.float32)),
        std=Tensor(np.ones(out_channels, dtype=np.float32)),
        gamma=Tensor(np.ones(out_channels, dtype=np.float32)),
        beta=Tensor(np.zeros(out_channels, dtype=np.float32)),
        in_channels=in_channels,
        kh=kh,
        kw=kw,
        stride=stride,
        padding=padding,
        activation=act,
    )


def build_layers(layer_specs, input_shape, loss: str | None, init: str, seed: int):
    """Materialize a DSL layer list into layer objects with initialized tensors."""
    rng = np.random.default_rng(seed)
    layers: list = []
    shape = tuple(input_shape)
    for spec in layer_specs:
        parts = spec.split(":")
        head = parts[0]
        if head in L.ACTIVATIONS:
            layers.append(L.Activation(head))
            continue
        if head == "linear":
            if len(parts) != 2:
                raise ConfigError(f"layer {spec!r}: expected linear:OUT")
            out_features = _spec_int(spec, parts[1])
            if out_features < 1:
                raise ConfigError(f"layer {spec!r}: width must be positive")
            in_features = int(np.prod(shape))
            layers.append(
                L.Linear(
                    weight=Tensor(
                        _init_weight(rng, (out_features, in_features), in_features, init)
                    ),
                    bias=Tensor(np.zeros(out_features, dtype=np.float32)),
                )
            )
            shape = (out_features,)
            continue
        if head in ("convbn", "residual"):
            if len(shape) != 3:
                raise ConfigError(f"layer {spec!r}: needs a CxHxW input, have {shape}")
            out_channels, kh, kw, stride, padding, act = _parse_conv_spec(spec, parts[1:])
            make = lambda: _make_convbn(
                rng, shape[0], out_channels, kh, kw, stride, padding, act, init
            )
            if head == "convbn":
                layer = make()
            else:
                layer = L.ResidualBlock(branch1=make(), branch2=make())
            layers.append(layer)
            probe = layer if head == "convbn" else layer.branch1
            oh, ow = L.conv_output_hw(shape[1], shape[2], probe)
            if oh < 1 or ow < 1:
                raise ConfigError(f"layer {spec!r}: empty output for input {shape}")
            shape = (out_channels, oh, ow)
            continue
        if head == "mha":
            if len(parts) != 2:
                raise ConfigError(f"layer {spec!r}: expected mha:HxM or mha:m0,m1,...")
            if "x" in parts[1]:
                n_heads, rows = (_spec_int(spec, v) for v in parts[1].split("x"))
                dims = [rows] * n_heads
            else:
                dims = [_spec_int(spec, v) for v in parts[1].split(",")]
            if not dims or any(d < 1 for d in dims):
                raise ConfigError(f"layer {spec!r}: head widths must be positive")
            in_features = int(np.prod(shape))
            layers.append(
                L.MultiHeadAttention(
                    weights=[
                        Tensor(_init_weight(rng, (d, in_features), in_features, init))
                        for d in dims
                    ],
                    biases=[Tensor(np.zeros(d, dtype=np.float32)) for d in dims],
                )
            )
            shape = (sum(dims),)
            continue
        raise ConfigError(f"unknown layer spec {spec!r}")
    if loss:
        layers.append(L.Loss(loss))
    return layers


def build_model(cfg: ExperimentConfig, loss: str | None = "from-config") -> ModelGraph:
    loss_kind = cfg.loss if loss == "from-config" else loss
    layers = build_layers(cfg.layer_specs, cfg.input_shape, loss_kind, cfg.init, cfg.model_seed)
    try:
        return ModelGraph(layers, cfg.input_shape)
    except ZigPruneError as exc:
        raise ConfigError(f"model does not validate: {exc}") from exc


def format_layer_spec(layer) -> str:
    """DSL string for a layer object (used to serialize slim architectures)."""
    if isinstance(layer, L.Linear):
        return f"linear:{layer.out_features}"
    if isinstance(layer, L.ConvBN):
        return (
            f"convbn:{layer.out_channels}:{layer.kh}x{layer.kw}:s{layer.stride}:"
            f"p{layer.padding}:{layer.activation}"
        )
    if isinstance(layer, L.ResidualBlock):
        b1, b2 = layer.branch1, layer.branch2
        same = (
            b1.out_channels == b2.out_channels
            and (b1.kh, b1.kw, b1.stride, b1.padding, b1.activation)
            == (b2.kh, b2.kw, b2.stride, b2.padding, b2.activation)
        )
        if not same:
            raise ConfigError("cannot format a residual block with differing branch shapes")
        return (
            f"residual:{b1.out_channels}:{b1.kh}x{b1.kw}:s{b1.stride}:"
            f"p{b1.padding}:{b1.activation}"
        )
    if isinstance(layer, L.MultiHeadAttention):
        return "mha:" + ",".join(str(d) for d in layer.head_dims)
    if isinstance(layer, L.Activation):
        return layer.kind
    if isinstance(layer, L.Loss):
        return ""  # carried separately
    raise ConfigError(f"cannot format layer {type(layer).__name__}")


def model_to_specs(model: ModelGraph) -> list[str]:
    return [s for s in (format_layer_spec(layer) for layer in model.layers) if s]


def build_dataset(cfg: ExperimentConfig):
    from . import data

    ds = cfg.dataset
    kind = ds["kind"]
    if kind == "synthetic-classify":
        return data.generate_blobs(
            classes=ds["classes"],
            features=ds["features"],
            train_samples=ds["samples"],
            test_samples=ds.get("test_samples", 0),
            separation=ds.get("separation", 3.0),
            seed=ds.get("seed", 0),
        )
    if kind == "synthetic-glasso":
        dataset, _ = data.generate_group_lasso(
            n_groups=ds["groups"],
            group_size=ds["group_size"],
            support=ds.get("support", 0),
            samples=ds["samples"],
            noise=ds.get("noise", 0.0),
            seed=ds.get("seed", 0),
            coef_scale=ds.get("coef_scale", 1.0),
        )
        return dataset
    if kind == "idx":
        return data.load_idx(ds["images"], ds["labels"])
    return data.load_csv(ds["path"], ds.get("target", "class"))
