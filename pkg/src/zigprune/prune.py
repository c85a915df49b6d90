"""One-shot pruning: drop zero groups and the matching downstream input slices.

Removing a group deletes its layer's output unit (conv channel / weight row /
attention head row) together with the columns or input channels of the next
parameterized layer that consumed that unit. Because the groups are
zero-invariant, the slim model computes the same outputs as the full model
parameterized with the zeroed solution, up to float re-association.

FLOPs are counted as one per multiply-accumulate, per sample:
linear m*n; conv m*(c*kh*kw)*oh*ow plus m*oh*ow for the BN scale; attention
sum of m_h*n per head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .errors import DegenerateLayerError, StructuralError
from .model import ModelGraph
from .tensor import Tensor
from .zig import GroupPartition


@dataclass
class PruneReport:
    zero_groups: list[int]
    retained_groups: list[int]
    layer_maps: list[dict]
    params_before: int
    params_after: int
    bn_stats_before: int
    bn_stats_after: int
    flops_before: int
    flops_after: int
    max_deviation: float | None = None
    slim_layers: list[str] | None = None
    input_shape: list[int] | None = None

    def to_jsonl(self) -> str:
        summary = {
            "type": "summary",
            "zero_groups": self.zero_groups,
            "retained_groups": self.retained_groups,
            "params_before": self.params_before,
            "params_after": self.params_after,
            "bn_stats_before": self.bn_stats_before,
            "bn_stats_after": self.bn_stats_after,
            "flops_before": self.flops_before,
            "flops_after": self.flops_after,
            "max_deviation": self.max_deviation,
            "slim_layers": self.slim_layers,
            "input_shape": self.input_shape,
        }
        lines = [json.dumps(summary, sort_keys=True)]
        for entry in self.layer_maps:
            lines.append(json.dumps({"type": "layer", **entry}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "PruneReport":
        lines = [json.loads(line) for line in text.strip().splitlines() if line.strip()]
        summary = next(obj for obj in lines if obj.get("type") == "summary")
        layer_maps = [
            {k: v for k, v in obj.items() if k != "type"}
            for obj in lines
            if obj.get("type") == "layer"
        ]
        return cls(
            zero_groups=summary["zero_groups"],
            retained_groups=summary["retained_groups"],
            layer_maps=layer_maps,
            params_before=summary["params_before"],
            params_after=summary["params_after"],
            bn_stats_before=summary["bn_stats_before"],
            bn_stats_after=summary["bn_stats_after"],
            flops_before=summary["flops_before"],
            flops_after=summary["flops_after"],
            max_deviation=summary.get("max_deviation"),
            slim_layers=summary.get("slim_layers"),
            input_shape=summary.get("input_shape"),
        )


# ---------------------------------------------------------------------------
# counters


def count_params(model: ModelGraph) -> tuple[int, int]:
    """(trainable scalar count, stored BN statistic count)."""
    trainable = sum(t.size for t in model.params.values())
    stats = sum(t.size for t in model.constants.values())
    return trainable, stats


def flops_detail(model: ModelGraph) -> list[dict]:
    """Per-layer multiply-accumulate counts for one sample."""
    detail = []
    for i, layer in enumerate(model.layers):
        entry = {"layer": i, "kind": type(layer).__name__, "flops": 0}
        if isinstance(layer, L.Linear):
            entry["flops"] = layer.out_features * layer.in_features
        elif isinstance(layer, L.ConvBN):
            _, oh, ow = model.shapes[i]
            conv = layer.out_channels * layer.kernel.data.shape[1] * oh * ow
            bn = layer.out_channels * oh * ow
            entry.update(flops=conv + bn, conv=conv, bn=bn)
        elif isinstance(layer, L.ResidualBlock):
            _, oh, ow = model.shapes[i]
            total = 0
            for branch in (layer.branch1, layer.branch2):
                total += branch.out_channels * branch.kernel.data.shape[1] * oh * ow
                total += branch.out_channels * oh * ow
            entry["flops"] = total
        elif isinstance(layer, L.MultiHeadAttention):
            entry["flops"] = sum(m_h * layer.in_features for m_h in layer.head_dims)
        detail.append(entry)
    return detail


def count_flops_params(model: ModelGraph) -> tuple[int, int]:
    """(per-sample multiply-accumulates, trainable parameter count)."""
    flops = sum(entry["flops"] for entry in flops_detail(model))
    return flops, count_params(model)[0]


# ---------------------------------------------------------------------------
# surgery


def _conv_column_indices(kept_channels, kh: int, kw: int) -> np.ndarray:
    block = kh * kw
    return np.concatenate(
        [np.arange(c * block, (c + 1) * block, dtype=np.int64) for c in kept_channels]
    )


def _slim_convbn(branch: L.ConvBN, kept_rows, kept_in_channels) -> L.ConvBN:
    rows = np.asarray(kept_rows, dtype=np.int64)
    cols = _conv_column_indices(kept_in_channels, branch.kh, branch.kw)
    return L.ConvBN(
        kernel=Tensor(branch.kernel.data[np.ix_(rows, cols)]),
        bias=Tensor(branch.bias.data[rows]),
        mean=Tensor(branch.mean.data[rows]),
        std=Tensor(branch.std.data[rows]),
        gamma=Tensor(branch.gamma.data[rows]),
        beta=Tensor(branch.beta.data[rows]),
        in_channels=len(kept_in_channels),
        kh=branch.kh,
        kw=branch.kw,
        stride=branch.stride,
        padding=branch.padding,
        activation=branch.activation,
    )


def prune(
    model: ModelGraph,
    partition: GroupPartition,
    x_star: np.ndarray | None = None,
    keep_one: bool = False,
    force_zero=(),
) -> tuple[ModelGraph, PruneReport]:
    """Build the slim model implied by the exactly-zero penalized groups of x*.

    `force_zero` treats extra group ids as zero regardless of their values
    (useful as a negative control). When every group of a layer is zero the
    default is to fail; `keep_one` retains the largest-norm group instead.
    """
    work = model.clone()
    if x_star is not None:
        work.set_flat(np.asarray(x_star, dtype=np.float32))
    x = work.get_flat()

    counts = partition.pen_nonzero_counts(x)
    zero_set = set(int(g) for g in partition.pen_gids[counts == 0])
    zero_set.update(int(g) for g in force_zero)
    retained = [g.gid for g in partition.groups if g.gid not in zero_set]

    # per-layer kept units, in group order
    kept_by_layer: dict[int, list] = {}
    for i, layer in enumerate(model.layers):
        layer_groups = partition.groups_of_layer(i)
        if not layer_groups:
            continue
        kept = [g for g in layer_groups if g.gid not in zero_set]
        if not kept:
            if not keep_one:
                raise DegenerateLayerError(
                    f"layer {i}: every group is zero, slim width would be 0 "
                    f"(pass keep_one=True to retain the largest group)"
                )
            norms = [float(np.linalg.norm(x[g.indices].astype(np.float64))) for g in layer_groups]
            best = layer_groups[int(np.argmax(norms))]
            kept = [best]
            zero_set.discard(best.gid)
            if best.gid not in retained:
                retained.append(best.gid)
                retained.sort()
        kept_by_layer[i] = kept

    slim_layers = []
    layer_maps = []
    # kept input bookkeeping: conv domain tracks channel ids, flat domain
    # tracks feature indices into the full model's flattened value
    domain = "conv" if len(model.input_shape) == 3 else "flat"
    if domain == "conv":
        kept_channels = list(range(model.input_shape[0]))
        conv_hw = model.input_shape[1:]
    else:
        kept_features = list(range(model.input_shape[0]))

    def to_flat():
        nonlocal domain, kept_features
        if domain == "conv":
            block = conv_hw[0] * conv_hw[1]
            kept_features = [
                c * block + j for c in kept_channels for j in range(block)
            ]
            domain = "flat"

    for i, layer in enumerate(model.layers):
        if isinstance(layer, L.Activation):
            slim_layers.append(L.Activation(layer.kind))
            layer_maps.append({"layer": i, "kind": "activation", "kept": None})
            continue
        if isinstance(layer, L.Loss):
            slim_layers.append(L.Loss(layer.kind))
            layer_maps.append({"layer": i, "kind": "loss", "kept": None})
            continue
        if isinstance(layer, L.ConvBN):
            kept = kept_by_layer.get(i)
            rows = [g.unit for g in kept] if kept is not None else list(range(layer.out_channels))
            slim_layers.append(_slim_convbn(layer, rows, kept_channels))
            layer_maps.append(
                {
                    "layer": i,
                    "kind": "convbn",
                    "kept": rows,
                    "width_before": layer.out_channels,
                    "width_after": len(rows),
                }
            )
            kept_channels = rows
            h, w = conv_hw
            conv_hw = L.conv_output_hw(h, w, layer)
            continue
        if isinstance(layer, L.ResidualBlock):
            kept = kept_by_layer.get(i)
            rows = (
                [g.unit for g in kept]
                if kept is not None
                else list(range(layer.branch1.out_channels))
            )
            slim_layers.append(
                L.ResidualBlock(
                    branch1=_slim_convbn(layer.branch1, rows, kept_channels),
                    branch2=_slim_convbn(layer.branch2, rows, kept_channels),
                )
            )
            layer_maps.append(
                {
                    "layer": i,
                    "kind": "residual",
                    "kept": rows,
                    "width_before": layer.branch1.out_channels,
                    "width_after": len(rows),
                }
            )
            kept_channels = rows
            h, w = conv_hw
            conv_hw = L.conv_output_hw(h, w, layer.branch1)
            continue
        if isinstance(layer, L.Linear):
            to_flat()
            kept = kept_by_layer.get(i)
            if kept is not None:
                rows = np.asarray([g.unit for g in kept], dtype=np.int64)
            else:
                rows = np.arange(layer.out_features, dtype=np.int64)
            cols = np.asarray(kept_features, dtype=np.int64)
            slim_layers.append(
                L.Linear(
                    weight=Tensor(layer.weight.data[np.ix_(rows, cols)]),
                    bias=Tensor(layer.bias.data[rows]),
                )
            )
            layer_maps.append(
                {
                    "layer": i,
                    "kind": "linear",
                    "kept": [int(r) for r in rows],
                    "width_before": layer.out_features,
                    "width_after": int(rows.size),
                }
            )
            kept_features = [int(r) for r in rows]
            continue
        if isinstance(layer, L.MultiHeadAttention):
            to_flat()
            kept = kept_by_layer.get(i)
            cols = np.asarray(kept_features, dtype=np.int64)
            weights, biases = [], []
            kept_out = []
            offset = 0
            for h in range(layer.n_heads):
                m_h = layer.weights[h].data.shape[0]
                if kept is not None:
                    head_rows = np.asarray(
                        [g.unit for g in kept if g.head == h], dtype=np.int64
                    )
                    head_out = [g.out_index for g in kept if g.head == h]
                else:
                    head_rows = np.arange(m_h, dtype=np.int64)
                    head_out = list(range(offset, offset + m_h))
                offset += m_h
                if head_rows.size == 0:
                    continue  # head contributes nothing; drop it entirely
                weights.append(Tensor(layer.weights[h].data[np.ix_(head_rows, cols)]))
                biases.append(Tensor(layer.biases[h].data[head_rows]))
                kept_out.extend(head_out)
            slim_layers.append(L.MultiHeadAttention(weights=weights, biases=biases))
            layer_maps.append(
                {
                    "layer": i,
                    "kind": "mha",
                    "kept": [int(v) for v in kept_out],
                    "width_before": layer.out_features,
                    "width_after": len(kept_out),
                }
            )
            kept_features = [int(v) for v in kept_out]
            continue

    slim = ModelGraph(slim_layers, model.input_shape)
    zero_sorted = sorted(zero_set)
    params_before, stats_before = count_params(model)
    params_after, stats_after = count_params(slim)
    flops_before, _ = count_flops_params(model)
    flops_after, _ = count_flops_params(slim)
    report = PruneReport(
        zero_groups=zero_sorted,
        retained_groups=sorted(retained),
        layer_maps=layer_maps,
        params_before=params_before,
        params_after=params_after,
        bn_stats_before=stats_before,
        bn_stats_after=stats_after,
        flops_before=flops_before,
        flops_after=flops_after,
        input_shape=list(model.input_shape),
    )
    return slim, report


def equivalence_check(full: ModelGraph, slim: ModelGraph, n_inputs: int, seed: int = 0) -> float:
    """Max absolute output gap between the two models over seeded random inputs."""
    if full.input_shape != slim.input_shape:
        raise StructuralError(
            f"input shapes differ: {full.input_shape} vs {slim.input_shape}"
        )
    rng = np.random.default_rng(seed)
    inputs = rng.standard_normal((n_inputs, *full.input_shape)).astype(np.float32)
    out_full, _ = full.forward(inputs)
    out_slim, _ = slim.forward(inputs)
    if out_full.shape != out_slim.shape:
        raise StructuralError(
            f"output shapes differ: {out_full.shape} vs {out_slim.shape}"
        )
    if out_full.size == 0:
        return 0.0
    return float(np.abs(out_full.astype(np.float64) - out_slim.astype(np.float64)).max())
