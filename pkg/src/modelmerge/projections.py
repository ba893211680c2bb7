"""Constraint restoration for merge coefficients.

``project_simplex`` maps a mixing-weight vector back onto the probability
simplex; ``clip_delta`` rescales a residual so that its Frobenius norm stays
within ``rho`` times the norm of the merged layer.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .errors import IncompatibleArchitectureError, NumericError


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{x : x >= 0, sum(x) = 1}``.

    Sort-based threshold method: find the largest ``k`` such that the ``k``
    biggest entries stay positive after a common shift, then clip.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("project_simplex expects a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise NumericError("project_simplex input must be finite")
    n = v.size
    if n == 1:
        return np.ones(1)
    if v.min() >= 0 and abs(v.sum() - 1.0) <= 4 * np.finfo(float).eps:
        return v.copy()
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, n + 1)
    active = np.nonzero(u - css / k > 0)[0][-1]
    tau = css[active] / (active + 1)
    x = np.maximum(v - tau, 0.0)
    # absorb rounding so the sum is 1 to the last ulp
    support = x > 0
    x[support] += (1.0 - x.sum()) / support.sum()
    return np.maximum(x, 0.0)


def frobenius(tensors: Mapping[str, np.ndarray]) -> float:
    """Frobenius norm over the concatenation of all tensors of one layer."""
    return float(np.sqrt(sum(float(np.sum(t * t)) for t in tensors.values())))


def clip_delta(
    delta: Mapping[str, np.ndarray], reconstructed: Mapping[str, np.ndarray], rho: float
) -> dict[str, np.ndarray]:
    """Scale ``delta`` by ``rho * ||W|| / ||delta||`` when it exceeds the norm ball.

    ``reconstructed`` is the layer ``W`` the bound refers to; it is evaluated
    once, as given, and ``delta`` is scaled a single time.
    """
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    if set(delta) != set(reconstructed) or any(
        np.shape(delta[r]) != np.shape(reconstructed[r]) for r in delta
    ):
        raise IncompatibleArchitectureError("delta and layer tensors differ in shape")
    d_norm = frobenius(delta)
    bound = rho * frobenius(reconstructed)
    if d_norm <= bound or d_norm == 0.0:
        return dict(delta)
    gamma = bound / d_norm
    return {r: t * gamma for r, t in delta.items()}
