"""Command-line pipeline: partition, train, prune, verify, flops, run.

Every subcommand takes `--config PATH` plus an optional `--seed` override for
the training seed. Artifacts land in the config's output directory:

    partition.txt    one group per line (id, structure tag, member spans)
    metrics.jsonl    one JSON object per epoch
    full.ckpt        trained full model parameters
    slim.ckpt        pruned model parameters
    report.jsonl     prune summary plus per-layer kept-unit maps

Exit status is 0 on success; failures print a stage-tagged message and
return nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import (
    ExperimentConfig,
    build_dataset,
    build_layers,
    build_model,
    load_config,
    model_to_specs,
)
from .data import Dataset, classification_accuracy
from .errors import StateError, ZigPruneError
from .hspg import train
from .model import ModelGraph
from .prune import PruneReport, count_flops_params, equivalence_check, prune
from .regularizer import sparsity_metrics
from .zig import GroupPartition, partition_zig


def _ensure_outdir(cfg: ExperimentConfig) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg.output_dir


def _path(cfg: ExperimentConfig, name: str) -> str:
    return os.path.join(cfg.output_dir, name)


def make_partition(cfg: ExperimentConfig, model: ModelGraph) -> GroupPartition:
    """The ZIG partition, or hand-laid groups for the planted regression bed."""
    if cfg.dataset.get("kind") == "synthetic-glasso":
        n_groups = cfg.dataset["groups"]
        size = cfg.dataset["group_size"]
        expected = n_groups * size
        if cfg.input_shape != (expected,):
            raise ZigPruneError(
                f"synthetic-glasso expects model.input_shape = {expected} "
                f"(groups x group_size), got {cfg.input_shape}"
            )
        index_lists = [np.arange(g * size, (g + 1) * size) for g in range(n_groups)]
        penalized = [True] * n_groups
        # remaining trainable scalars (the bias) form one unpenalized group
        rest = np.arange(expected, model.n_flat)
        if rest.size:
            index_lists.append(rest)
            penalized.append(False)
        return GroupPartition.from_indices(model.n_flat, index_lists, penalized)
    return partition_zig(model, penalize_output=cfg.penalize_output)


def _train_subset(dataset: Dataset) -> Dataset:
    return dataset.subset("train") if dataset.splits is not None else dataset


def stage_partition(cfg: ExperimentConfig) -> GroupPartition:
    model = build_model(cfg)
    partition = make_partition(cfg, model)
    _ensure_outdir(cfg)
    with open(_path(cfg, "partition.txt"), "w") as fh:
        fh.write(partition.export_text())
    print(
        f"partition: {partition.n_groups} groups "
        f"({partition.n_penalized} penalized) over {partition.n_flat} parameters"
    )
    return partition


def stage_train(cfg: ExperimentConfig):
    model = build_model(cfg)
    partition = make_partition(cfg, model)
    dataset = _train_subset(build_dataset(cfg))
    x_final, trace = train(model, partition, dataset, cfg.train)
    _ensure_outdir(cfg)
    with open(_path(cfg, "metrics.jsonl"), "w") as fh:
        for entry in trace:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    with open(_path(cfg, "partition.txt"), "w") as fh:
        fh.write(partition.export_text())
    model.save_checkpoint(_path(cfg, "full.ckpt"))
    metrics = sparsity_metrics(x_final, partition)
    last_loss = trace[-1]["loss"] if trace else float("nan")
    print(
        f"train: {cfg.train.epochs} epochs, final loss {last_loss:.6g}, "
        f"group sparsity {metrics.group_sparsity:.3f} "
        f"({metrics.zero_groups}/{partition.n_penalized} zero groups)"
    )
    return model, partition, trace


def stage_prune(cfg: ExperimentConfig):
    model = build_model(cfg)
    ckpt = _path(cfg, "full.ckpt")
    if not os.path.exists(ckpt):
        raise StateError(f"no trained checkpoint at {ckpt}; run the train stage first")
    model.load_checkpoint(ckpt)
    partition = make_partition(cfg, model)
    slim, report = prune(model, partition, keep_one=cfg.keep_one)
    report.slim_layers = model_to_specs(slim)
    slim.save_checkpoint(_path(cfg, "slim.ckpt"))
    with open(_path(cfg, "report.jsonl"), "w") as fh:
        fh.write(report.to_jsonl())
    print(
        f"prune: removed {len(report.zero_groups)} zero groups; "
        f"params {report.params_before} -> {report.params_after}, "
        f"flops {report.flops_before} -> {report.flops_after}"
    )
    return model, slim, report


def _load_slim(cfg: ExperimentConfig, report: PruneReport) -> ModelGraph:
    layers = build_layers(report.slim_layers, cfg.input_shape, cfg.loss, "zeros", 0)
    slim = ModelGraph(layers, cfg.input_shape)
    slim.load_checkpoint(_path(cfg, "slim.ckpt"))
    return slim


def stage_verify(cfg: ExperimentConfig) -> float:
    model = build_model(cfg)
    model.load_checkpoint(_path(cfg, "full.ckpt"))
    with open(_path(cfg, "report.jsonl")) as fh:
        report = PruneReport.from_jsonl(fh.read())
    slim = _load_slim(cfg, report)
    deviation = equivalence_check(model, slim, cfg.verify_inputs, seed=cfg.train.seed)
    report.max_deviation = deviation
    with open(_path(cfg, "report.jsonl"), "w") as fh:
        fh.write(report.to_jsonl())
    print(f"verify: max output deviation {deviation:.3e} over {cfg.verify_inputs} inputs")
    return deviation


def stage_flops(cfg: ExperimentConfig):
    model = build_model(cfg)
    flops, params = count_flops_params(model)
    print(f"flops: full model {flops} MACs/sample, {params} trainable parameters")
    report_path = _path(cfg, "report.jsonl")
    if os.path.exists(report_path):
        with open(report_path) as fh:
            report = PruneReport.from_jsonl(fh.read())
        slim = _load_slim(cfg, report)
        sflops, sparams = count_flops_params(slim)
        ratio = sflops / flops if flops else 1.0
        print(
            f"flops: slim model {sflops} MACs/sample ({ratio:.1%} remaining), "
            f"{sparams} trainable parameters"
        )
    return flops, params


def stage_run(cfg: ExperimentConfig):
    stage_partition(cfg)
    model, partition, trace = stage_train(cfg)
    _, slim, report = stage_prune(cfg)
    deviation = stage_verify(cfg)
    stage_flops(cfg)
    dataset = build_dataset(cfg)
    if dataset.task == "classify" and dataset.splits is not None:
        test = dataset.subset("test")
        if test.n:
            with open(_path(cfg, "report.jsonl")) as fh:
                final_report = PruneReport.from_jsonl(fh.read())
            acc = classification_accuracy(_load_slim(cfg, final_report), test)
            print(f"run: slim test accuracy {acc:.4f}")
    print(f"run: complete, max deviation {deviation:.3e}")


_STAGES = {
    "partition": stage_partition,
    "train": stage_train,
    "prune": stage_prune,
    "verify": stage_verify,
    "flops": stage_flops,
    "run": stage_run,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="zigprune",
        description="Group-sparse training and one-shot structured pruning pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _STAGES:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the experiment config")
        p.add_argument("--seed", type=int, default=None, help="override optimizer.seed")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
    except (OSError, ZigPruneError) as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.train.seed = args.seed
    try:
        _STAGES[args.command](cfg)
    except ZigPruneError as exc:
        print(f"[{args.command}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
