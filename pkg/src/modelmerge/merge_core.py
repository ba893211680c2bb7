"""Layer-wise merge representation ``W^l = sum_i theta_i^l W_i^l + delta^l``.

``MergeCoefficients`` holds one simplex weight vector per layer and one
residual bundle per layer.  Any model produced from a source bank by the
genetic operators has such a representation; ``track_operator`` computes the
child coefficients directly from the parents' coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import IncompatibleArchitectureError
from .nn import LayerParams, ModelParams
from .projections import frobenius

SIMPLEX_TOL = 1e-12
NORM_TOL = 1e-12


class SourceBank:
    """A fixed, pairwise merge-compatible list of source models."""

    def __init__(self, sources: Sequence[ModelParams]):
        sources = tuple(sources)
        if not sources:
            raise ValueError("a source bank needs at least one model")
        for s in sources[1:]:
            sources[0].check_compatible(s)
        self.sources = sources

    def __len__(self) -> int:
        return len(self.sources)

    def __getitem__(self, i: int) -> ModelParams:
        return self.sources[i]

    @property
    def n(self) -> int:
        return len(self.sources)

    @property
    def template(self) -> ModelParams:
        return self.sources[0]

    @property
    def num_layers(self) -> int:
        return len(self.template.layers)

    def subbank(self, indices) -> "SourceBank":
        return SourceBank([self.sources[i] for i in sorted(indices)])

    def mix(self, layer: int, role: str, weights) -> np.ndarray:
        """``sum_i weights[i] * W_i`` for one tensor, summed in source order."""
        out = weights[0] * self.sources[0].layers[layer][role]
        for w, src in zip(weights[1:], self.sources[1:]):
            out = out + w * src.layers[layer][role]
        return out


Delta = Mapping[str, np.ndarray]


@dataclass(frozen=True)
class MergeCoefficients:
    """Per-layer simplex weights ``theta`` (shape ``[L, n]``) and residuals ``delta``.

    ``rho`` bounds each residual relative to its reconstructed layer;
    ``math.inf`` means unbounded (used when tracking genetic operators,
    where bit-flip mutations are not norm-limited).
    """

    theta: np.ndarray
    delta: tuple[Delta, ...]
    rho: float = math.inf

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        if theta.ndim != 2 or theta.shape[1] < 1:
            raise ValueError("theta must have shape [L, n]")
        if len(self.delta) != theta.shape[0]:
            raise ValueError("need one residual bundle per layer")
        if np.any(theta < 0) or np.any(np.abs(theta.sum(axis=1) - 1.0) > SIMPLEX_TOL):
            raise ValueError("every theta row must lie on the probability simplex")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        theta.flags.writeable = False
        delta = tuple({r: np.array(t, dtype=np.float64) for r, t in d.items()} for d in self.delta)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "delta", delta)

    @property
    def n(self) -> int:
        return self.theta.shape[1]

    @property
    def num_layers(self) -> int:
        return self.theta.shape[0]

    def delta_is_zero(self) -> bool:
        return all(not np.any(t) for d in self.delta for t in d.values())

    def norm_violation(self, bank: SourceBank) -> float:
        """Largest ``||delta^l|| - rho ||W^l||`` over layers (<= 0 when feasible)."""
        if math.isinf(self.rho):
            return -math.inf
        model = reconstruct(self, bank)
        return max(
            frobenius(d) - self.rho * frobenius(layer.tensors)
            for d, layer in zip(self.delta, model.layers)
        )

    def check(self, bank: SourceBank) -> None:
        if self.n != bank.n or self.num_layers != bank.num_layers:
            raise IncompatibleArchitectureError("coefficients do not match the source bank")
        if self.norm_violation(bank) > NORM_TOL:
            raise ValueError("residual exceeds the rho norm bound")

    def average_weights(self) -> np.ndarray:
        """Mean mixing weight of each source over layers."""
        return self.theta.mean(axis=0)


def zero_delta(bank: SourceBank) -> tuple[dict[str, np.ndarray], ...]:
    return tuple(
        {r: np.zeros_like(t) for r, t in layer.tensors.items()} for layer in bank.template.layers
    )


def reconstruct(coeffs: MergeCoefficients, bank: SourceBank) -> ModelParams:
    if coeffs.n != bank.n or coeffs.num_layers != bank.num_layers:
        raise IncompatibleArchitectureError(
            f"coefficients for n={coeffs.n}, L={coeffs.num_layers} do not match "
            f"bank with n={bank.n}, L={bank.num_layers}"
        )
    layers = []
    for l, layer in enumerate(bank.template.layers):
        d = coeffs.delta[l]
        if set(d) != set(layer.tensors):
            raise IncompatibleArchitectureError(f"residual roles differ in layer {layer.name!r}")
        tensors = {}
        for role, t in layer.tensors.items():
            if d[role].shape != t.shape:
                raise IncompatibleArchitectureError(f"residual shape differs for {layer.name}.{role}")
            tensors[role] = bank.mix(l, role, coeffs.theta[l]) + d[role]
        layers.append(_layer_unchecked(layer.name, tensors))
    return ModelParams(tuple(layers), bank.template.architecture_id)


def _layer_unchecked(name: str, tensors: dict) -> LayerParams:
    # Residuals may push norm statistics anywhere; the forward pass reports trouble.
    try:
        return LayerParams(name, tensors)
    except ValueError:
        return LayerParams.raw(name, tensors)


def average_init(bank: SourceBank, rho: float = math.inf) -> MergeCoefficients:
    theta = np.full((bank.num_layers, bank.n), 1.0 / bank.n)
    return MergeCoefficients(theta, zero_delta(bank), rho)


def direct_average(bank: SourceBank) -> ModelParams:
    """Elementwise mean of the sources, i.e. uniform weights and zero residual."""
    return reconstruct(average_init(bank), bank)


def source_coefficients(bank: SourceBank, k: int, rho: float = math.inf) -> MergeCoefficients:
    theta = np.zeros((bank.num_layers, bank.n))
    theta[:, k] = 1.0
    return MergeCoefficients(theta, zero_delta(bank), rho)


# operator descriptors ------------------------------------------------------


@dataclass(frozen=True)
class Reproduce:
    pass


@dataclass(frozen=True)
class Crossover:
    """Swap the first ``point`` layers (``1 <= point < L``)."""

    point: int


@dataclass(frozen=True)
class Interpolate:
    lam: float


@dataclass(frozen=True)
class Mutate:
    """Set one scalar (flat ``index`` into ``layer``'s ``role`` tensor) to ``value``."""

    layer: int
    role: str
    index: int
    value: float


Operator = Union[Reproduce, Crossover, Interpolate, Mutate]


def track_operator(
    parents: Sequence[MergeCoefficients], op: Operator, bank: SourceBank | None = None
) -> tuple[MergeCoefficients, ...]:
    """Coefficients of the offspring of ``op`` applied to models with ``parents``.

    Returns a tuple: two children for crossover, one otherwise.  Mutation
    needs ``bank`` to know the current value of the mutated scalar.
    """
    if isinstance(op, Reproduce):
        return (parents[0],)

    if isinstance(op, Crossover):
        a, b = parents
        L = a.num_layers
        if not 1 <= op.point < L:
            raise IndexError(f"crossover point {op.point} outside [1, {L})")
        k = op.point
        theta1 = np.vstack([b.theta[:k], a.theta[k:]])
        theta2 = np.vstack([a.theta[:k], b.theta[k:]])
        delta1 = b.delta[:k] + a.delta[k:]
        delta2 = a.delta[:k] + b.delta[k:]
        rho = max(a.rho, b.rho)
        return MergeCoefficients(theta1, delta1, rho), MergeCoefficients(theta2, delta2, rho)

    if isinstance(op, Interpolate):
        a, b = parents
        lam = op.lam
        theta = lam * a.theta + (1 - lam) * b.theta
        delta = tuple(
            {r: lam * da[r] + (1 - lam) * db[r] for r in da} for da, db in zip(a.delta, b.delta)
        )
        return (MergeCoefficients(theta, delta, max(a.rho, b.rho)),)

    if isinstance(op, Mutate):
        (a,) = parents
        if bank is None:
            raise ValueError("tracking a mutation needs the source bank")
        if not 0 <= op.layer < a.num_layers:
            raise IndexError(f"mutation layer {op.layer} out of range")
        d = a.delta[op.layer]
        if op.role not in d or not 0 <= op.index < d[op.role].size:
            raise IndexError(f"mutation site {op.role}[{op.index}] out of range")
        mixed = bank.mix(op.layer, op.role, a.theta[op.layer]).ravel()[op.index]
        new = dict(d)
        t = d[op.role].copy()
        t.ravel()[op.index] = op.value - mixed
        new[op.role] = t
        delta = a.delta[: op.layer] + (new,) + a.delta[op.layer + 1 :]
        return (MergeCoefficients(a.theta, delta, a.rho),)

    raise TypeError(f"unknown operator {op!r}")
