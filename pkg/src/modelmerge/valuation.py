"""Shapley values of source models: exact enumeration and group-testing estimates.

Utilities are set functions on source indices ``0..n-1``.  The empty
coalition has utility 0, so efficiency reads ``sum(s) == U(all)``.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import CapacityError
from .merge_core import MergeCoefficients, SourceBank
from .nn import Dataset, ModelParams, error_rate_of
from .soma import SomaConfig, soma_run

MAX_EXACT_N = 12


class UtilityFunction:
    """Cached, deterministic utility ``U(S)`` over subsets of ``range(n)``.

    Concurrent calls for the same subset evaluate it once; all callers see
    the same value.
    """

    def __init__(self, evaluator: Callable[[tuple[int, ...]], float], n: int):
        if n < 1:
            raise ValueError("need at least one player")
        self.evaluator = evaluator
        self.n = n
        self.cache: dict[tuple[int, ...], float] = {}
        self._pending: dict[tuple[int, ...], threading.Event] = {}
        self._lock = threading.Lock()
        self.evaluations = 0

    @classmethod
    def tabular(cls, table: Mapping[Iterable[int], float], n: int) -> "UtilityFunction":
        values = {tuple(sorted(k)): float(v) for k, v in table.items()}
        return cls(lambda s: values[s], n)

    def key(self, subset: Iterable[int]) -> tuple[int, ...]:
        key = tuple(sorted(set(int(i) for i in subset)))
        if key and (key[0] < 0 or key[-1] >= self.n):
            raise IndexError(f"subset {key} outside range({self.n})")
        return key

    def __call__(self, subset: Iterable[int]) -> float:
        key = self.key(subset)
        if not key:
            return 0.0
        while True:
            with self._lock:
                if key in self.cache:
                    return self.cache[key]
                event = self._pending.get(key)
                owner = event is None
                if owner:
                    event = self._pending[key] = threading.Event()
            if owner:
                break
            event.wait()
        try:
            value = float(self.evaluator(key))
            with self._lock:
                self.cache[key] = value
                self.evaluations += 1
        finally:
            with self._lock:
                del self._pending[key]
            event.set()
        return value

    def full(self) -> float:
        return self(range(self.n))


def exact_shapley(u: UtilityFunction) -> np.ndarray:
    """``s_i = sum_S |S|!(n-1-|S|)!/n! (U(S+i) - U(S))`` over ``S`` not containing ``i``."""
    n = u.n
    if n > MAX_EXACT_N:
        raise CapacityError(f"exact Shapley needs 2^{n} utilities; use group testing for n > {MAX_EXACT_N}")
    weights = [math.factorial(k) * math.factorial(n - 1 - k) / math.factorial(n) for k in range(n)]
    s = np.zeros(n)
    for i in range(n):
        others = [j for j in range(n) if j != i]
        terms = []
        for k in range(n):
            for coalition in itertools.combinations(others, k):
                terms.append(weights[k] * (u(coalition + (i,)) - u(coalition)))
        s[i] = math.fsum(terms)
    return s


def sampling_distribution(n: int) -> tuple[float, np.ndarray]:
    """Normalizer ``Z = 2 H_{n-1}`` and size probabilities ``q_k`` for ``k = 1..n-1``."""
    if n < 2:
        raise ValueError("group testing needs n >= 2")
    Z = 2.0 * math.fsum(1.0 / k for k in range(1, n))
    q = np.array([(1.0 / k + 1.0 / (n - k)) / Z for k in range(1, n)])
    return Z, q


@dataclass
class GroupTests:
    delta_u: np.ndarray
    u_t: np.ndarray
    beta: np.ndarray
    sizes: np.ndarray
    Z: float


def draw_tests(n: int, T: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sampled sizes ``l_t`` and membership matrix ``beta`` (``T x n``)."""
    Z, q = sampling_distribution(n)
    sizes = rng.choice(np.arange(1, n), size=T, p=q)
    beta = np.zeros((T, n), dtype=np.int8)
    for t, k in enumerate(sizes):
        beta[t, rng.choice(n, size=int(k), replace=False)] = 1
    return sizes, beta


def group_test(u: UtilityFunction, T: int, rng: np.random.Generator, workers: int = 1) -> GroupTests:
    """Run ``T`` random coalition tests and form ``dU_ij = Z/T sum_t u_t (b_ti - b_tj)``."""
    if T < 1:
        raise ValueError("at least one test is required")
    n = u.n
    Z, _ = sampling_distribution(n)
    sizes, beta = draw_tests(n, T, rng)
    subsets = [tuple(np.flatnonzero(row)) for row in beta]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            u_t = np.array(list(pool.map(u, subsets)))
    else:
        u_t = np.array([u(s) for s in subsets])
    v = (Z / T) * (beta.T.astype(np.float64) @ u_t)
    delta_u = v[:, None] - v[None, :]
    return GroupTests(delta_u, u_t, beta, sizes, Z)


def solve_feasibility(delta_u, U_total: float, epsilon: float) -> tuple[np.ndarray, float, bool]:
    """Least-squares point of ``s_i - s_j = dU_ij`` with ``sum(s) = U_total``.

    Returns ``(s_hat, max_residual, feasible)``; ``feasible`` tells whether every
    pairwise residual is within ``epsilon / (2 sqrt(n))``.
    """
    delta_u = np.asarray(delta_u, dtype=np.float64)
    n = delta_u.shape[0]
    s = U_total / n + delta_u.sum(axis=1) / n
    s += (U_total - math.fsum(s)) / n
    residual = float(np.max(np.abs((s[:, None] - s[None, :]) - delta_u)))
    return s, residual, residual <= epsilon / (2.0 * math.sqrt(n))


@dataclass
class ShapleyReport:
    estimates: np.ndarray
    T: int
    delta_u: np.ndarray
    epsilon: float
    delta: float
    u_total: float
    residual_max: float
    feasible: bool
    exact: np.ndarray | None = None
    average_theta: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.estimates)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "T": self.T,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "estimates": [float(x) for x in self.estimates],
            "exact": None if self.exact is None else [float(x) for x in self.exact],
            "residual_max": self.residual_max,
            "feasible": bool(self.feasible),
            "utility_full": self.u_total,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source_id", "shapley_estimate", "average_theta_weight"])
            for i, s in enumerate(self.estimates):
                avg = "" if self.average_theta is None else repr(float(self.average_theta[i]))
                w.writerow([i, repr(float(s)), avg])


def estimate_shapley(
    u: UtilityFunction,
    T: int,
    epsilon: float,
    delta: float,
    rng: np.random.Generator,
    *,
    with_exact: bool = False,
    workers: int = 1,
) -> ShapleyReport:
    if T < 1:
        raise ValueError("at least one test is required")
    tests = group_test(u, T, rng, workers=workers)
    u_total = u.full()
    s_hat, residual, feasible = solve_feasibility(tests.delta_u, u_total, epsilon)
    exact = exact_shapley(u) if with_exact and u.n <= MAX_EXACT_N else None
    return ShapleyReport(s_hat, T, tests.delta_u, epsilon, delta, u_total, residual, feasible, exact)


def _h(x: float) -> float:
    return (1.0 + x) * math.log1p(x) - x


def _overlap_exact(n: int, cross_sign: int) -> Fraction:
    if cross_sign not in (1, -1):
        raise ValueError("cross_sign must be +1 or -1")
    Z = 2 * sum(Fraction(1, k) for k in range(1, n))
    q = {k: (Fraction(1, k) + Fraction(1, n - k)) / Z for k in range(1, n)}
    total = Fraction(n - 2, n) * q[1]
    for k in range(2, n):
        total += q[k] * (1 + Fraction(cross_sign * 2 * k * (n - k), n * (n - 1)))
    return total


def overlap_term(n: int, cross_sign: int = 1) -> float:
    """``q_tot`` of the sample bound, evaluated in exact rational arithmetic.

    ``cross_sign=+1`` uses the pairwise factor ``1 + 2k(n-k)/(n(n-1))``;
    ``cross_sign=-1`` uses ``1 + 2k(k-n)/(n(n-1))``.  With ``+1`` the value
    reaches 1 for every ``n >= 3``, which makes the bound undefined.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    return float(_overlap_exact(n, cross_sign))


def sample_bound(n: int, epsilon: float, delta: float, cross_sign: int = 1) -> int:
    """Number of group tests sufficient for an (epsilon, delta)-approximation."""
    if n < 2:
        raise ValueError("n must be at least 2")
    if not (0 < epsilon < 1 and 0 < delta < 1):
        raise ValueError("epsilon and delta must lie in (0, 1)")
    Z, _ = sampling_distribution(n)
    q_tot = _overlap_exact(n, cross_sign)
    spread_exact = 1 - q_tot * q_tot
    if spread_exact <= 0:
        raise ValueError(f"bound undefined for n={n}: 1 - q_tot^2 = {float(spread_exact):.6g} <= 0")
    spread = float(spread_exact)
    arg = epsilon / (Z * math.sqrt(n) * spread)
    return math.ceil(8.0 * math.log(n * (n - 1) / (2.0 * delta)) / (spread * _h(arg)))


def subset_seed(seed: int, subset: tuple[int, ...]) -> int:
    mask = sum(1 << i for i in subset)
    return int(np.random.SeedSequence([seed, mask]).generate_state(1)[0])


class ModelUtility(UtilityFunction):
    """``U(S) = 1 - metric(merge(S))`` with merges by SOMA on the validation set."""

    def __init__(
        self,
        bank: SourceBank,
        valset: Dataset,
        testset: Dataset,
        soma: SomaConfig = SomaConfig(),
        metric: Callable[[ModelParams, Dataset], float] = error_rate_of,
        fitness: Callable[[ModelParams, Dataset], float] | None = None,
    ):
        self.bank = bank
        self.valset = valset
        self.testset = testset
        self.soma = soma
        self.metric = metric
        self.fitness = fitness or metric
        self.coeffs: dict[tuple[int, ...], MergeCoefficients] = {}
        super().__init__(self._evaluate, bank.n)

    def _evaluate(self, subset: tuple[int, ...]) -> float:
        cfg = replace(self.soma, seed=subset_seed(self.soma.seed, subset))
        result = soma_run(self.bank.subbank(subset), self.valset, cfg, self.fitness)
        self.coeffs[subset] = result.coeffs
        return 1.0 - float(self.metric(result.model, self.testset))

    def full_coeffs(self) -> MergeCoefficients:
        self.full()
        return self.coeffs[tuple(range(self.n))]


def model_utility(subset, bank: SourceBank, valset: Dataset, testset: Dataset, soma: SomaConfig = SomaConfig()) -> float:
    """One-off ``U(S)``; use :class:`ModelUtility` to share the cache across calls."""
    subset = tuple(sorted(subset))
    if not subset:
        return 0.0
    return ModelUtility(bank, valset, testset, soma)(subset)
