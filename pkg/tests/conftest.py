import numpy as np
import pytest

from modelmerge.data import ShardSpec, generate_shards
from modelmerge.merge_core import SourceBank
from modelmerge.nn import Architecture, Dataset, LayerParams, ModelParams, TrainConfig
from modelmerge.pipeline import train_sources


def random_model(arch: Architecture, seed: int, scale: float = 1.0) -> ModelParams:
    """Model with every tensor drawn at random (norm statistics kept positive)."""
    rng = np.random.default_rng(seed)
    layers = []
    for layer in arch.init(seed).layers:
        t = {}
        for role, x in layer.tensors.items():
            if role == "norm_var":
                t[role] = rng.uniform(0.5, 2.0, size=x.shape)
            else:
                t[role] = scale * rng.normal(size=x.shape)
        layers.append(LayerParams(layer.name, t))
    return ModelParams(tuple(layers), arch.architecture_id)


def random_batch(m: int, d: int, classes: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(m, d)), rng.integers(0, classes, size=m), classes)


@pytest.fixture
def small_arch():
    return Architecture(3, (4,), 3, normalize=True)


@pytest.fixture
def small_bank(small_arch):
    return SourceBank([random_model(small_arch, s, scale=0.5) for s in (1, 2, 3)])


@pytest.fixture(scope="session")
def trained_setup():
    """Three sources trained on skewed shards plus validation/test sets (seconds to build)."""
    spec = ShardSpec(n_shards=3, samples_per_shard=300, feature_dim=4, class_count=3, skew=0.7,
                     seed=5, val_samples=300, test_samples=300)
    shards, val, test = generate_shards(spec)
    arch = Architecture(4, (8,), 3, normalize=True)
    bank = SourceBank(train_sources(shards, arch, TrainConfig(learning_rate=0.1, epochs=5, batch_size=32)))
    return bank, val, test


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
