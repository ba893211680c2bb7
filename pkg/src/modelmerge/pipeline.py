"""Desk-scale experiment plumbing shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
from dataclasses import dataclass

from .data import ShardSpec, generate_shards
from .merge_core import SourceBank, direct_average
from .nn import Architecture, Dataset, ModelParams, TrainConfig, error_rate_of, forward_loss, train_source

FITNESS = {
    "error": error_rate_of,
    "loss": forward_loss,
}


def fitness_by_name(name: str):
    try:
        return FITNESS[name]
    except KeyError:
        raise ValueError(f"unknown fitness {name!r}; choose from {sorted(FITNESS)}") from None


def train_sources(shards: list[Dataset], arch: Architecture, hyper: TrainConfig) -> list[ModelParams]:
    """Train one model per shard from the shared initialization; shard ``i`` shuffles with ``seed + i``."""
    out = []
    for i, shard in enumerate(shards):
        cfg = TrainConfig(
            learning_rate=hyper.learning_rate,
            epochs=hyper.epochs,
            batch_size=hyper.batch_size,
            seed=hyper.seed + i,
            init_seed=hyper.init_seed,
            norm_momentum=hyper.norm_momentum,
        )
        out.append(train_source(shard, arch, cfg))
    return out


@dataclass
class Experiment:
    spec: ShardSpec
    arch: Architecture
    shards: list[Dataset]
    val: Dataset
    test: Dataset
    bank: SourceBank

    @property
    def average(self) -> ModelParams:
        return direct_average(self.bank)


def build_experiment(
    spec: ShardSpec = ShardSpec(),
    hidden: tuple[int, ...] = (16,),
    normalize: bool = True,
    hyper: TrainConfig = TrainConfig(learning_rate=0.1, epochs=20, batch_size=32),
) -> Experiment:
    shards, val, test = generate_shards(spec)
    arch = Architecture(spec.feature_dim, hidden, spec.class_count, normalize=normalize)
    bank = SourceBank(train_sources(shards, arch, hyper))
    return Experiment(spec, arch, shards, val, test, bank)


def evaluate(model: ModelParams, data: Dataset) -> dict:
    return {"error_rate": error_rate_of(model, data), "loss": forward_loss(model, data)}


def compare_rows(
    models: list[tuple[str, ModelParams]], valset: Dataset, testset: Dataset, metric=error_rate_of
) -> list[dict]:
    """One row per ``(label, model)`` pair, in the given order."""
    return [
        {"label": label, "val_metric": metric(m, valset), "test_metric": metric(m, testset)}
        for label, m in models
    ]


def write_compare_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "val_metric", "test_metric"])
        for r in rows:
            w.writerow([r["label"], repr(float(r["val_metric"])), repr(float(r["test_metric"]))])
