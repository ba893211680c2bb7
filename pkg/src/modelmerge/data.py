"""Synthetic heterogeneous shards and delimited-text dataset files."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError
from .nn import Dataset


@dataclass(frozen=True)
class ShardSpec:
    """Gaussian-mixture classification data split over ``n_shards`` curators.

    ``skew`` moves each shard's class prior from the pooled uniform prior
    (``skew = 0``) to a prior supported only on the classes the shard owns
    (``skew = 1``). Class ``c`` is owned by shard ``c % n_shards``.
    """

    n_shards: int = 5
    samples_per_shard: int = 2000
    feature_dim: int = 8
    class_count: int = 5
    skew: float = 0.7
    noise: float = 1.0
    seed: int = 0
    val_samples: int = 2000
    test_samples: int = 2000
    separation: float = 1.5

    def __post_init__(self):
        if self.n_shards < 1 or self.samples_per_shard < 1:
            raise ValueError("n_shards and samples_per_shard must be positive")
        if self.feature_dim < 1 or self.class_count < 1:
            raise ValueError("feature_dim and class_count must be positive")
        if not 0.0 <= self.skew <= 1.0:
            raise ValueError("skew must lie in [0, 1]")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.val_samples < 1 or self.test_samples < 1:
            raise ValueError("validation and test sizes must be positive")

    def shard_priors(self) -> np.ndarray:
        c = self.class_count
        uniform = np.full(c, 1.0 / c)
        priors = np.empty((self.n_shards, c))
        for s in range(self.n_shards):
            owned = np.array([k % self.n_shards == s for k in range(c)], dtype=float)
            if not owned.any():
                owned[s % c] = 1.0
            priors[s] = (1 - self.skew) * uniform + self.skew * owned / owned.sum()
        return priors


def _draw(rng, means, prior, m, noise, class_count) -> Dataset:
    labels = rng.choice(class_count, size=m, p=prior)
    x = means[labels] + noise * rng.standard_normal((m, means.shape[1]))
    return Dataset(x, labels, class_count)


def generate_shards(spec: ShardSpec) -> tuple[list[Dataset], Dataset, Dataset]:
    """Return ``(training shards, validation set, test set)`` for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    means = spec.separation * rng.standard_normal((spec.class_count, spec.feature_dim))
    priors = spec.shard_priors()
    shards = [
        _draw(rng, means, p, spec.samples_per_shard, spec.noise, spec.class_count) for p in priors
    ]
    pooled = priors.mean(axis=0)
    val = _draw(rng, means, pooled, spec.val_samples, spec.noise, spec.class_count)
    test = _draw(rng, means, pooled, spec.test_samples, spec.noise, spec.class_count)
    return shards, val, test


def save_delimited(data: Dataset, path, header: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow([f"x{j}" for j in range(data.dim)] + ["label"])
        for x, y in zip(data.features, data.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def load_delimited(path, class_count: int | None = None) -> Dataset:
    """Parse ``feature,...,feature,label`` rows; a non-numeric first row is a header.

    ``class_count`` defaults to ``max(label) + 1``.
    """
    rows, labels = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and not rows and _is_header(row):
                continue
            if len(row) < 2:
                raise ParseError("need at least one feature and a label", lineno)
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"expected {width} cells, found {len(row)}", lineno)
            try:
                feats = [float(c) for c in row[:-1]]
                label = int(row[-1])
            except ValueError as exc:
                raise ParseError(f"non-numeric cell ({exc})", lineno) from None
            if not np.all(np.isfinite(feats)):
                raise ParseError("non-finite feature value", lineno)
            if label < 0 or (class_count is not None and label >= class_count):
                raise ParseError(f"label {label} out of range", lineno)
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    k = class_count if class_count is not None else max(labels) + 1
    return Dataset(np.array(rows), np.array(labels), k)


def _is_header(row) -> bool:
    try:
        [float(c) for c in row]
    except ValueError:
        return True
    return False


def write_shards(spec: ShardSpec, out_dir) -> dict:
    """Write every shard plus validation/test files and a ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shards, val, test = generate_shards(spec)
    manifest = {"spec": asdict(spec), "class_count": spec.class_count, "shards": []}
    for i, shard in enumerate(shards):
        name = f"shard{i}.csv"
        save_delimited(shard, out / name)
        manifest["shards"].append(name)
    save_delimited(val, out / "validation.csv")
    save_delimited(test, out / "test.csv")
    manifest["validation"] = "validation.csv"
    manifest["test"] = "test.csv"
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
