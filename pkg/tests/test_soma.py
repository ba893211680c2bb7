import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_batch, random_model
from modelmerge.merge_core import (
    MergeCoefficients,
    SourceBank,
    average_init,
    direct_average,
    reconstruct,
)
from modelmerge.nn import Architecture, LayerParams, ModelParams, forward_loss
from modelmerge.projections import frobenius
from modelmerge.soma import (
    SomaConfig,
    SomaState,
    coefficient_gradients,
    soma_run,
    soma_step,
    theta_gradient,
)


def quadratic_objective(target: ModelParams):
    """``l(W) = sum ||W - W*||^2`` with its exact gradient; ignores the batch."""

    def objective(model, batch):
        loss = 0.0
        grads = []
        for lm, lt in zip(model.layers, target.layers):
            diff = {r: lm[r] - lt[r] for r in lm.tensors}
            loss += sum(float(np.sum(d * d)) for d in diff.values())
            grads.append(LayerParams.raw(lm.name, {r: 2 * d for r, d in diff.items()}))
        return loss, ModelParams(tuple(grads), model.architecture_id)

    return objective


def quadratic_fitness(target):
    obj = quadratic_objective(target)
    return lambda model, data: obj(model, data)[0]


def start_state(bank, rho):
    c = average_init(bank, rho)
    return SomaState(c, c)


def assert_constraints(coeffs: MergeCoefficients, bank: SourceBank, rho: float):
    assert np.all(coeffs.theta >= 0)
    np.testing.assert_allclose(coeffs.theta.sum(axis=1), 1.0, atol=1e-12)
    model = reconstruct(coeffs, bank)
    for d, layer in zip(coeffs.delta, model.layers):
        assert frobenius(d) <= rho * frobenius(layer.tensors) + 1e-9


class TestThetaGradient:
    def test_identity_dot(self):
        g = {"weight": np.array([[1.0, 2.0], [3.0, 4.0]])}
        assert theta_gradient(g, {"weight": np.eye(2)}) == 5.0

    def test_zero_source(self):
        g = {"weight": np.ones((2, 2)), "bias": np.ones(2)}
        assert theta_gradient(g, {"weight": np.zeros((2, 2)), "bias": np.zeros(2)}) == 0.0

    def test_sums_over_roles(self):
        g = {"weight": np.ones((1, 2)), "bias": np.array([2.0, 3.0])}
        src = {"weight": np.array([[1.0, 1.0]]), "bias": np.array([1.0, 1.0])}
        assert theta_gradient(g, src) == 7.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            theta_gradient({"weight": np.ones((2, 2))}, {"weight": np.ones((2, 3))})
        with pytest.raises(ValueError):
            theta_gradient({"weight": np.ones(2)}, {"bias": np.ones(2)})


class TestCoefficientGradients:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_difference(self, seed, small_arch):
        bank = SourceBank([random_model(small_arch, s, scale=0.5) for s in (seed, seed + 10, seed + 20)])
        rng = np.random.default_rng(seed)
        theta = rng.dirichlet(np.ones(3), size=2)
        delta = tuple(
            {r: 0.05 * rng.normal(size=t.shape) for r, t in layer.tensors.items()} for layer in bank.template.layers
        )
        coeffs = MergeCoefficients(theta, delta)
        batch = random_batch(7, 3, 3, seed + 50)
        _, g_theta, g_delta, _ = coefficient_gradients(coeffs, bank, batch)

        def loss_at(th, dl):
            # theta may leave the simplex here; reconstruct is linear so use the raw mixture
            layers = []
            for l, layer in enumerate(bank.template.layers):
                layers.append(LayerParams(layer.name, {r: bank.mix(l, r, th[l]) + dl[l][r] for r in layer.tensors}))
            return forward_loss(ModelParams(tuple(layers), bank.template.architecture_id), batch)

        h = 1e-5
        for l in range(2):
            for i in range(3):
                tp, tm = theta.copy(), theta.copy()
                tp[l, i] += h
                tm[l, i] -= h
                fd = (loss_at(tp, delta) - loss_at(tm, delta)) / (2 * h)
                assert abs(fd - g_theta[l, i]) <= 1e-4 * max(abs(fd), 1e-6)
            for r, t in delta[l].items():
                for idx in range(t.size):
                    dp = [dict(d) for d in delta]
                    dm = [dict(d) for d in delta]
                    dp[l][r] = t.copy()
                    dp[l][r].ravel()[idx] += h
                    dm[l][r] = t.copy()
                    dm[l][r].ravel()[idx] -= h
                    fd = (loss_at(theta, dp) - loss_at(theta, dm)) / (2 * h)
                    an = g_delta[l][r].ravel()[idx]
                    assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-6)


class TestSomaStep:
    def test_eta_zero_keeps_coefficients(self, small_bank):
        state = start_state(small_bank, 0.1)
        nxt = soma_step(state, small_bank, random_batch(8, 3, 3, 0), SomaConfig(eta=0.0))
        np.testing.assert_array_equal(nxt.coeffs.theta, state.coeffs.theta)
        assert nxt.coeffs.delta_is_zero()
        assert nxt.iteration == 1

    def test_single_source(self, small_arch):
        bank = SourceBank([random_model(small_arch, 0)])
        state = start_state(bank, 0.1)
        for k in range(3):
            state = soma_step(state, bank, random_batch(8, 3, 3, k), SomaConfig(eta=0.5))
        np.testing.assert_array_equal(state.coeffs.theta, [[1.0], [1.0]])

    def test_zero_gradient(self, small_bank):
        target = direct_average(small_bank)
        state = start_state(small_bank, 0.1)
        nxt = soma_step(state, small_bank, random_batch(4, 3, 3, 0), SomaConfig(eta=0.3),
                        objective=quadratic_objective(target))
        np.testing.assert_array_equal(nxt.coeffs.theta, state.coeffs.theta)
        assert nxt.coeffs.delta_is_zero()
        assert nxt.iteration == state.iteration + 1

    @pytest.mark.parametrize("rho", [0.0, 0.01, 0.1, 0.5])
    def test_constraints_after_each_step(self, small_bank, rho):
        cfg = SomaConfig(eta=0.5, rho=rho)
        state = start_state(small_bank, rho)
        for k in range(15):
            state = soma_step(state, small_bank, random_batch(16, 3, 3, k), cfg)
            assert_constraints(state.coeffs, small_bank, rho)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0, 1), st.floats(0.001, 5.0), st.integers(0, 1000))
    def test_constraints_property(self, rho, eta, seed):
        arch = Architecture(3, (4,), 3, normalize=True)
        bank = SourceBank([random_model(arch, s, scale=0.5) for s in (seed, seed + 1)])
        cfg = SomaConfig(eta=eta, rho=rho)
        state = start_state(bank, rho)
        for k in range(4):
            state = soma_step(state, bank, random_batch(8, 3, 3, seed + k), cfg)
        assert_constraints(state.coeffs, bank, rho)


class TestSomaRun:
    def test_zero_iterations_is_average(self, small_bank):
        res = soma_run(small_bank, random_batch(20, 3, 3, 0), SomaConfig(max_iterations=0))
        assert res.model.equals(direct_average(small_bank))
        assert len(res.log) == 1

    def test_initial_model_bitwise_average(self, small_bank):
        assert reconstruct(average_init(small_bank, 0.1), small_bank).equals(direct_average(small_bank))

    def test_quadratic_surrogate_matches_grid(self):
        arch = Architecture(2, (3,), 2)
        a, b = random_model(arch, 1), random_model(arch, 2)
        bank = SourceBank([a, b])
        weights = (0.3, 0.8)
        target = ModelParams(
            tuple(
                LayerParams(la.name, {r: w * la[r] + (1 - w) * lb[r] for r in la.tensors})
                for w, la, lb in zip(weights, a.layers, b.layers)
            ),
            arch.architecture_id,
        )
        cfg = SomaConfig(eta=0.01, rho=0.0, batch_size=1, max_iterations=300, patience=None)
        res = soma_run(bank, random_batch(1, 2, 2, 0), cfg, fitness=quadratic_fitness(target),
                       objective=quadratic_objective(target))
        grid = np.linspace(0.0, 1.0, 1001)
        for l, (la, lb, lt) in enumerate(zip(a.layers, b.layers, target.layers)):
            dist = [sum(float(np.sum((t * la[r] + (1 - t) * lb[r] - lt[r]) ** 2)) for r in la.tensors) for t in grid]
            best = grid[int(np.argmin(dist))]
            assert abs(res.coeffs.theta[l, 0] - best) <= 0.01

    def test_rho_zero_convex_hull(self, trained_setup):
        bank, val, _ = trained_setup
        res = soma_run(bank, val, SomaConfig(rho=0.0, max_iterations=3, eta=0.5))
        assert res.coeffs.delta_is_zero()
        for l, layer in enumerate(res.model.layers):
            for r, t in layer.tensors.items():
                np.testing.assert_allclose(t, bank.mix(l, r, res.coeffs.theta[l]), rtol=0, atol=0)

    def test_best_fitness_non_increasing(self, trained_setup):
        bank, val, _ = trained_setup
        res = soma_run(bank, val, SomaConfig(max_iterations=6, patience=None))
        best = [row["best_val_fitness"] for row in res.log]
        assert all(y <= x for x, y in zip(best, best[1:]))
        assert res.best_fitness == best[-1] <= res.log[0]["full_val_fitness"]

    def test_deterministic(self, trained_setup):
        bank, val, _ = trained_setup
        cfg = SomaConfig(max_iterations=3, seed=7)
        a, b = soma_run(bank, val, cfg), soma_run(bank, val, cfg)
        assert a.model.equals(b.model) and a.log == b.log

    def test_patience(self, small_bank):
        cfg = SomaConfig(eta=0.0, max_iterations=20, patience=3)
        res = soma_run(small_bank, random_batch(10, 3, 3, 0), cfg)
        assert len(res.log) == 4

    def test_log_csv(self, small_bank, tmp_path):
        res = soma_run(small_bank, random_batch(10, 3, 3, 0), SomaConfig(max_iterations=2, patience=None))
        path = tmp_path / "soma.csv"
        res.write_log(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iteration,mean_batch_loss,full_val_fitness,best_val_fitness"
        assert [line.split(",")[0] for line in lines[1:]] == ["0", "1", "2"]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SomaConfig(eta=-1.0)
        with pytest.raises(ValueError):
            SomaConfig(rho=-0.1)
        with pytest.raises(ValueError):
            SomaConfig(batch_size=0)
        assert math.isfinite(SomaConfig().eta)
