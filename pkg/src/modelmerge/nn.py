"""Dense feed-forward networks on plain numpy arrays.

A model is an ordered list of layers. Every layer holds a ``weight`` matrix of
shape ``[fan_in, fan_out]`` and a ``bias`` vector; optionally a layer also
carries ``norm_mean``/``norm_var`` statistics that standardize its input
(batch-norm style running statistics). Hidden layers use ``tanh``; the last
layer produces logits for a softmax cross-entropy loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping

import numpy as np

from .errors import IncompatibleArchitectureError, NumericError, TrainingDivergedError
from .metrics import error_rate

WEIGHT = "weight"
BIAS = "bias"
NORM_MEAN = "norm_mean"
NORM_VAR = "norm_var"

NORM_VAR_FLOOR = 1e-8


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class LayerParams:
    name: str
    tensors: Mapping[str, np.ndarray]

    def __post_init__(self):
        tensors = {role: _frozen(t) for role, t in self.tensors.items()}
        var = tensors.get(NORM_VAR)
        if var is not None and not np.all(var > 0):
            raise ValueError(f"layer {self.name!r}: norm_var entries must be strictly positive")
        object.__setattr__(self, "tensors", tensors)

    @classmethod
    def raw(cls, name: str, tensors: Mapping[str, np.ndarray]) -> "LayerParams":
        """Build without the ``norm_var`` positivity check (gradients, residual sums)."""
        out = object.__new__(cls)
        object.__setattr__(out, "name", name)
        object.__setattr__(out, "tensors", {role: _frozen(t) for role, t in tensors.items()})
        return out

    @property
    def roles(self) -> tuple[str, ...]:
        return tuple(self.tensors)

    def __getitem__(self, role: str) -> np.ndarray:
        return self.tensors[role]

    def signature(self) -> tuple:
        return (self.name, tuple((r, t.shape) for r, t in self.tensors.items()))


@dataclass(frozen=True)
class ModelParams:
    layers: tuple[LayerParams, ...]
    architecture_id: str

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a model needs at least one layer")
        object.__setattr__(self, "layers", layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self) -> Iterator[LayerParams]:
        return iter(self.layers)

    def signature(self) -> tuple:
        return (self.architecture_id, tuple(layer.signature() for layer in self.layers))

    def is_compatible(self, other: "ModelParams") -> bool:
        return self.signature() == other.signature()

    def check_compatible(self, other: "ModelParams") -> None:
        if not self.is_compatible(other):
            raise IncompatibleArchitectureError(
                f"models are not merge-compatible: {self.architecture_id!r} vs {other.architecture_id!r}"
            )

    def map(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> "ModelParams":
        """Apply ``fn(role, tensor)`` to every tensor, keeping the structure."""
        return ModelParams(
            tuple(
                LayerParams(layer.name, {r: fn(r, t) for r, t in layer.tensors.items()})
                for layer in self.layers
            ),
            self.architecture_id,
        )

    def replace_layer(self, index: int, layer: LayerParams) -> "ModelParams":
        layers = list(self.layers)
        layers[index] = layer
        return ModelParams(tuple(layers), self.architecture_id)

    @property
    def num_scalars(self) -> int:
        return sum(t.size for layer in self.layers for t in layer.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for layer in self.layers for t in layer.tensors.values()])

    def equals(self, other: "ModelParams") -> bool:
        """Bit-level equality of structure and every scalar."""
        if self.signature() != other.signature():
            return False
        return all(
            np.array_equal(a.tensors[r], b.tensors[r])
            for a, b in zip(self.layers, other.layers)
            for r in a.tensors
        )


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError("features must be a 2-d array [m, d]")
        if features.shape[0] < 1:
            raise ValueError("a dataset needs at least one sample")
        if labels.shape != (features.shape[0],):
            raise ValueError("labels must be a vector with one entry per sample")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ValueError("labels must lie in [0, class_count)")
        features.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "Dataset":
        return Dataset(self.features[index], self.labels[index], self.class_count)

    def sample_fraction(self, fraction: float, seed: int) -> "Dataset":
        """Uniform random subsample keeping ``max(1, round(fraction * m))`` rows."""
        if not 0 < fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")
        m = len(self)
        k = max(1, int(round(fraction * m)))
        if k == m:
            return self
        idx = np.sort(np.random.default_rng(seed).choice(m, size=k, replace=False))
        return self.subset(idx)


@dataclass(frozen=True)
class Architecture:
    """Multilayer perceptron shape: ``input_dim -> hidden... -> class_count``."""

    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    normalize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if min((self.input_dim, self.output_dim) + self.hidden) < 1:
            raise ValueError("layer widths must be positive")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim,) + self.hidden + (self.output_dim,)

    @property
    def architecture_id(self) -> str:
        tag = "mlp-tanh" + ("-norm" if self.normalize else "")
        return tag + ":" + "-".join(str(w) for w in self.widths)

    @classmethod
    def from_id(cls, architecture_id: str) -> "Architecture":
        tag, _, widths = architecture_id.partition(":")
        if tag not in ("mlp-tanh", "mlp-tanh-norm") or not widths:
            raise ValueError(f"unknown architecture id {architecture_id!r}")
        w = [int(x) for x in widths.split("-")]
        return cls(w[0], tuple(w[1:-1]), w[-1], normalize=tag.endswith("norm"))

    def init(self, seed: int) -> ModelParams:
        """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
        rng = np.random.default_rng(seed)
        layers = []
        widths = self.widths
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            tensors = {
                WEIGHT: rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                BIAS: rng.uniform(-bound, bound, size=fan_out),
            }
            if self.normalize:
                tensors[NORM_MEAN] = np.zeros(fan_in)
                tensors[NORM_VAR] = np.ones(fan_in)
            layers.append(LayerParams(f"layer{i}", tensors))
        return ModelParams(tuple(layers), self.architecture_id)


def _check_input(model: ModelParams, X: np.ndarray) -> None:
    w = model.layers[0].tensors.get(WEIGHT)
    if w is None or X.ndim != 2 or X.shape[1] != w.shape[0]:
        raise IncompatibleArchitectureError(
            f"input of shape {X.shape} does not fit model {model.architecture_id!r}"
        )
    for prev, layer in zip(model.layers[:-1], model.layers[1:]):
        if prev[WEIGHT].shape[1] != layer[WEIGHT].shape[0]:
            raise IncompatibleArchitectureError(f"layer {layer.name!r} does not chain")


def _forward(model: ModelParams, X: np.ndarray):
    _check_input(model, X)
    cache = []
    a = X
    last = len(model.layers) - 1
    with np.errstate(all="ignore"):
        for i, layer in enumerate(model.layers):
            if NORM_MEAN in layer.tensors:
                inv_std = 1.0 / np.sqrt(layer[NORM_VAR])
                centered = a - layer[NORM_MEAN]
                xhat = centered * inv_std
            else:
                inv_std = centered = None
                xhat = a
            z = xhat @ layer[WEIGHT] + layer[BIAS]
            out = z if i == last else np.tanh(z)
            cache.append((a, centered, inv_std, xhat, out))
            a = out
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite activation in forward pass")
    return a, cache


def logits(model: ModelParams, X: np.ndarray) -> np.ndarray:
    return _forward(model, np.asarray(X, dtype=np.float64))[0]


def predict(model: ModelParams, X: np.ndarray) -> np.ndarray:
    return np.argmax(logits(model, X), axis=1)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_classes(out: np.ndarray, batch: Dataset) -> None:
    if out.shape[1] != batch.class_count:
        raise IncompatibleArchitectureError(
            f"model emits {out.shape[1]} classes, batch has {batch.class_count}"
        )


def forward_loss(model: ModelParams, batch: Dataset) -> float:
    """Mean softmax cross-entropy of ``model`` on ``batch``."""
    z, _ = _forward(model, batch.features)
    _check_classes(z, batch)
    with np.errstate(over="ignore", invalid="ignore"):
        logp = _log_softmax(z)
        loss = -float(np.mean(logp[np.arange(len(batch)), batch.labels]))
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    return loss


def loss_and_grad(model: ModelParams, batch: Dataset) -> tuple[float, ModelParams]:
    z, cache = _forward(model, batch.features)
    _check_classes(z, batch)
    m = len(batch)
    with np.errstate(over="ignore", invalid="ignore"):
        logp = _log_softmax(z)
        loss = -float(np.mean(logp[np.arange(m), batch.labels]))
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    dz = np.exp(logp)
    dz[np.arange(m), batch.labels] -= 1.0
    dz /= m

    grads: list[LayerParams] = [None] * len(model.layers)  # type: ignore[list-item]
    with np.errstate(all="ignore"):
        for i in range(len(model.layers) - 1, -1, -1):
            layer = model.layers[i]
            a, centered, inv_std, xhat, _ = cache[i]
            g = {WEIGHT: xhat.T @ dz, BIAS: dz.sum(axis=0)}
            dxhat = dz @ layer[WEIGHT].T
            if centered is not None:
                g[NORM_MEAN] = -(dxhat * inv_std).sum(axis=0)
                g[NORM_VAR] = -0.5 * (dxhat * centered).sum(axis=0) * inv_std**3
                da = dxhat * inv_std
            else:
                da = dxhat
            grads[i] = _grad_layer(layer, g)
            if i > 0:
                dz = da * (1.0 - a**2)
    grad_model = ModelParams(tuple(grads), model.architecture_id)
    if not (math.isfinite(loss) and np.all(np.isfinite(grad_model.flat()))):
        raise NumericError("non-finite loss or gradient")
    return loss, grad_model


def _grad_layer(layer: LayerParams, g: dict) -> LayerParams:
    # keep the role order of the model
    return LayerParams.raw(layer.name, {r: g[r] for r in layer.tensors})


def backward(model: ModelParams, batch: Dataset) -> ModelParams:
    """Gradient of :func:`forward_loss` for every tensor, shaped like ``model``."""
    return loss_and_grad(model, batch)[1]


def error_rate_of(model: ModelParams, data: Dataset) -> float:
    return error_rate(predict(model, data.features), data.labels)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    init_seed: int = 0
    norm_momentum: float = 0.1


def _update_norm_stats(model: ModelParams, X: np.ndarray, momentum: float) -> ModelParams:
    if NORM_MEAN not in model.layers[0].tensors:
        return model
    _, cache = _forward(model, X)
    layers = []
    for layer, (a, *_rest) in zip(model.layers, cache):
        t = dict(layer.tensors)
        t[NORM_MEAN] = (1 - momentum) * t[NORM_MEAN] + momentum * a.mean(axis=0)
        t[NORM_VAR] = np.maximum(
            (1 - momentum) * t[NORM_VAR] + momentum * a.var(axis=0), NORM_VAR_FLOOR
        )
        layers.append(LayerParams(layer.name, t))
    return ModelParams(tuple(layers), model.architecture_id)


def train_source(shard: Dataset, arch: Architecture, hyper: TrainConfig = TrainConfig()) -> ModelParams:
    """Minibatch SGD on one shard from the shared seeded initialization.

    ``hyper.init_seed`` fixes the initial weights (shared across sources),
    ``hyper.seed`` fixes the minibatch order.  Normalization statistics, when
    the architecture has them, follow running averages of the layer inputs
    and are not moved by the gradient.
    """
    if shard.dim != arch.input_dim:
        raise IncompatibleArchitectureError(
            f"shard has {shard.dim} features, architecture expects {arch.input_dim}"
        )
    model = arch.init(hyper.init_seed)
    rng = np.random.default_rng(hyper.seed)
    m = len(shard)
    lr = hyper.learning_rate
    for epoch in range(hyper.epochs):
        order = rng.permutation(m)
        for start in range(0, m, hyper.batch_size):
            batch = shard.subset(order[start : start + hyper.batch_size])
            model = _update_norm_stats(model, batch.features, hyper.norm_momentum)
            try:
                loss, grad = loss_and_grad(model, batch)
            except NumericError as exc:
                raise TrainingDivergedError(epoch) from exc
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch)
            model = _sgd_update(model, grad, lr)
    return model


def _sgd_update(model: ModelParams, grad: ModelParams, lr: float) -> ModelParams:
    layers = []
    for layer, g in zip(model.layers, grad.layers):
        tensors = {}
        for role, t in layer.tensors.items():
            with np.errstate(over="ignore", invalid="ignore"):
                # overflow surfaces as a NumericError on the next forward pass
                tensors[role] = t - lr * g[role] if role in (WEIGHT, BIAS) else t
        layers.append(LayerParams(layer.name, tensors))
    return ModelParams(tuple(layers), model.architecture_id)
