"""Projected SGD over merge coefficients.

The merged model is never updated directly: each step reconstructs it from
``(theta, delta)``, backpropagates the validation loss, moves ``theta`` along
``-dL/dW . W_i`` and ``delta`` along ``-dL/dW``, projects every ``theta``
row back onto the simplex and shrinks ``delta`` back into its norm ball.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .errors import NumericError
from .merge_core import MergeCoefficients, SourceBank, average_init, reconstruct
from .nn import NORM_VAR, NORM_VAR_FLOOR, Dataset, ModelParams, error_rate_of, loss_and_grad
from .projections import clip_delta, frobenius, project_simplex

Fitness = Callable[[ModelParams, Dataset], float]
Objective = Callable[[ModelParams, Dataset], "tuple[float, ModelParams]"]


@dataclass(frozen=True)
class SomaConfig:
    eta: float = 0.05
    rho: float = 0.1
    batch_size: int = 32
    max_iterations: int = 10
    seed: int = 0
    patience: int | None = 3

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be nonnegative")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.batch_size < 1 or self.max_iterations < 0:
            raise ValueError("batch_size must be positive and max_iterations nonnegative")


@dataclass(frozen=True)
class SomaState:
    coeffs: MergeCoefficients
    best_coeffs: MergeCoefficients
    best_fitness: float = math.inf
    iteration: int = 0
    last_batch_loss: float = math.nan


@dataclass
class SomaResult:
    model: ModelParams
    coeffs: MergeCoefficients
    best_fitness: float
    log: list[dict] = field(default_factory=list)

    def write_log(self, path) -> None:
        write_log_csv(self.log, path)


LOG_COLUMNS = ("iteration", "mean_batch_loss", "full_val_fitness", "best_val_fitness")


def write_log_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in rows:
            w.writerow([row[c] if isinstance(row[c], int) else repr(float(row[c])) for c in LOG_COLUMNS])


def theta_gradient(dLdW: Mapping[str, np.ndarray], source_layer: Mapping[str, np.ndarray]) -> float:
    """Matrix dot product ``sum(dL/dW * W_i)`` summed over every tensor role."""
    if set(dLdW) != set(source_layer):
        raise ValueError("gradient and source layer have different tensor roles")
    total = 0.0
    for role, g in dLdW.items():
        w = source_layer[role]
        if np.shape(g) != np.shape(w):
            raise ValueError(f"shape mismatch for role {role!r}")
        total += float(np.sum(g * w))
    return total


def coefficient_gradients(
    coeffs: MergeCoefficients, bank: SourceBank, batch: Dataset, objective: Objective = loss_and_grad
):
    """``(loss, dL/dtheta [L, n], dL/ddelta per layer, reconstructed model)``.

    ``objective(model, batch)`` returns the loss and its model-shaped gradient.
    """
    model = reconstruct(coeffs, bank)
    loss, grad = objective(model, batch)
    g_theta = np.array(
        [
            [theta_gradient(g.tensors, src.layers[l].tensors) for src in bank.sources]
            for l, g in enumerate(grad.layers)
        ]
    )
    g_delta = tuple(dict(g.tensors) for g in grad.layers)
    return loss, g_theta, g_delta, model


def _fit_norm_ball(delta: dict, base: dict, rho: float) -> dict:
    """Shrink ``delta`` so ``||delta|| <= rho ||base + delta||`` holds for the final layer.

    Solves ``g^2 |d|^2 (1 - rho^2) - 2 rho^2 g <b, d> - rho^2 |b|^2 = 0`` for the
    largest feasible scale ``g`` in ``[0, 1]``.
    """
    d2 = sum(float(np.sum(t * t)) for t in delta.values())
    if d2 == 0.0:
        return delta
    full = {r: base[r] + delta[r] for r in delta}
    if math.sqrt(d2) <= rho * frobenius(full):
        return delta
    bd = sum(float(np.sum(base[r] * delta[r])) for r in delta)
    b2 = sum(float(np.sum(t * t)) for t in base.values())
    r2 = rho * rho
    a = d2 * (1 - r2)
    if a <= 0:
        return delta  # rho >= 1 with growing ball; constraint cannot bind tighter
    gamma = (r2 * bd + math.sqrt(max(r2 * r2 * bd * bd + a * r2 * b2, 0.0))) / a
    gamma = min(max(gamma, 0.0), 1.0) * (1 - 1e-12)
    return {r: t * gamma for r, t in delta.items()}


def soma_step(
    state: SomaState, bank: SourceBank, batch: Dataset, cfg: SomaConfig, objective: Objective = loss_and_grad
) -> SomaState:
    """One loop iteration: reconstruct, backprop, SGD on (theta, delta), project, clip."""
    coeffs = state.coeffs
    loss, g_theta, g_delta, model = coefficient_gradients(coeffs, bank, batch, objective)
    theta = coeffs.theta - cfg.eta * g_theta
    new_theta = np.vstack([project_simplex(row) for row in theta])
    new_delta = []
    for l, layer in enumerate(model.layers):
        d = {r: t - cfg.eta * g_delta[l][r] for r, t in coeffs.delta[l].items()}
        # norm measured on the layer reconstructed at the start of the iteration
        d = clip_delta(d, layer.tensors, cfg.rho)
        base = {r: bank.mix(l, r, new_theta[l]) for r in d}
        if NORM_VAR in d:
            d[NORM_VAR] = np.maximum(d[NORM_VAR], NORM_VAR_FLOOR - base[NORM_VAR])
        new_delta.append(_fit_norm_ball(d, base, cfg.rho))
    coeffs = MergeCoefficients(new_theta, tuple(new_delta), cfg.rho)
    return replace(state, coeffs=coeffs, iteration=state.iteration + 1, last_batch_loss=loss)


def _safe_fitness(fitness: Fitness, model: ModelParams, data: Dataset) -> float:
    try:
        value = float(fitness(model, data))
    except NumericError:
        return math.inf
    return value if math.isfinite(value) else math.inf


def soma_run(
    bank: SourceBank,
    valset: Dataset,
    cfg: SomaConfig = SomaConfig(),
    fitness: Fitness = error_rate_of,
    objective: Objective = loss_and_grad,
) -> SomaResult:
    """Merge ``bank`` by projected SGD on ``valset``; return the best model seen.

    One iteration is one shuffled pass over ``valset``.  Fitness (lower is
    better) is measured on the full validation set after every pass, and the
    returned coefficients are the best so far, so the result is never worse
    than the direct average the run starts from.  ``objective`` is the
    differentiable training loss (cross-entropy by default).
    """
    coeffs = average_init(bank, cfg.rho)
    start = reconstruct(coeffs, bank)
    fit0 = _safe_fitness(fitness, start, valset)
    state = SomaState(coeffs, coeffs, fit0, 0)
    log = [
        {
            "iteration": 0,
            "mean_batch_loss": objective(start, valset)[0],
            "full_val_fitness": fit0,
            "best_val_fitness": fit0,
        }
    ]
    stall = 0
    m = len(valset)
    for it in range(1, cfg.max_iterations + 1):
        rng = np.random.default_rng([cfg.seed, it])
        order = rng.permutation(m)
        losses = []
        for s in range(0, m, cfg.batch_size):
            batch = valset.subset(order[s : s + cfg.batch_size])
            state = soma_step(state, bank, batch, cfg, objective)
            losses.append(state.last_batch_loss)
        current = reconstruct(state.coeffs, bank)
        fit = _safe_fitness(fitness, current, valset)
        if fit < state.best_fitness:
            state = replace(state, best_coeffs=state.coeffs, best_fitness=fit)
            stall = 0
        else:
            stall += 1
        log.append(
            {
                "iteration": it,
                "mean_batch_loss": float(np.mean(losses)),
                "full_val_fitness": fit,
                "best_val_fitness": state.best_fitness,
            }
        )
        if cfg.patience is not None and stall >= cfg.patience:
            break
    return SomaResult(reconstruct(state.best_coeffs, bank), state.best_coeffs, state.best_fitness, log)
