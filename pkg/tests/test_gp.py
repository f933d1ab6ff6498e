import math

import numpy as np
import pytest
import torch

from rtdk.errors import (
    DegenerateDensityError,
    DegenerateEmbeddingError,
    NumericalFailureError,
    ShapeError,
)
from rtdk.gp import (
    ClassicalGpFit,
    GaussianPosterior,
    KernelParameters,
    MeanParameters,
    ObservationSet,
    _cholesky_with_escalation,
    as_tensor,
    classical_posterior,
    combination_kernel,
    destandardize,
    fit_gp_hyperparameters,
    gp_posterior,
    gp_posterior_batched,
    gram_matrix,
    linear_mean,
    log_marginal_likelihood,
    log_predictive_density,
    normalized_gram,
    normalized_kernel,
    standardize_masked,
)


def _loop_combination(z1, z2, alpha):
    s = float(np.dot(z1, z2)) / len(z1)
    return sum(alpha[k - 1] * s ** k / math.factorial(k)
               for k in range(1, len(alpha) + 1))


class TestCombinationKernel:
    def test_unit_inner_product_five_components(self):
        value = combination_kernel(np.ones(4), np.ones(4),
                                   KernelParameters.create(5))
        assert abs(float(value) - 103.0 / 60.0) < 1e-14
        assert round(float(value), 7) == 1.7166667

    def test_orthogonal_inputs_vanish(self):
        params = KernelParameters(np.log(np.array([2.0, 0.5, 3.0])))
        value = combination_kernel(np.array([1.0, 0.0]), np.array([0.0, 1.0]),
                                   params)
        assert float(value) == 0.0

    def test_matches_term_by_term_loop(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            k = int(rng.integers(1, 9))
            z1, z2 = rng.normal(size=3), rng.normal(size=3)
            alpha = rng.uniform(0.1, 3.0, k)
            params = KernelParameters(np.log(alpha))
            value = float(combination_kernel(z1, z2, params))
            assert abs(value - _loop_combination(z1, z2, alpha)) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            combination_kernel(np.ones(3), np.ones(4), KernelParameters.create(5))


class TestNormalizedKernel:
    def test_diagonal_is_exp_2u(self):
        z = np.array([0.5, -1.5, 2.0])
        value = normalized_kernel(z, z, 0.7, 0.7, KernelParameters.create(5))
        assert abs(float(value) - math.exp(1.4)) < 1e-12

    def test_unit_at_zero_u(self):
        z = np.array([0.5, -1.5])
        value = normalized_kernel(z, z, 0.0, 0.0, KernelParameters.create(5))
        assert abs(float(value) - 1.0) < 1e-14

    def test_bounded_by_one_at_zero_u(self):
        rng = np.random.default_rng(1)
        params = KernelParameters.create(5)
        for _ in range(300):
            z1, z2 = rng.normal(size=4), rng.normal(size=4)
            value = float(normalized_kernel(z1, z2, 0.0, 0.0, params))
            assert abs(value) <= 1.0 + 1e-12

    def test_zero_embedding_rejected(self):
        with pytest.raises(DegenerateEmbeddingError):
            normalized_kernel(np.zeros(3), np.ones(3), 0.0, 0.0,
                              KernelParameters.create(5))


class TestGram:
    def test_single_point(self):
        gram = gram_matrix(np.array([[1.0, 2.0]]), np.zeros(1),
                           KernelParameters.create(5), jitter=0.0)
        assert gram.shape == (1, 1)
        assert abs(float(gram[0, 0]) - 1.0) < 1e-12

    def test_duplicate_points_rank_one_before_jitter(self):
        z = np.array([[1.0, -0.5], [1.0, -0.5]])
        gram = normalized_gram(as_tensor(z), torch.zeros(2, dtype=torch.float64),
                               KernelParameters.create(5))
        assert np.allclose(gram.numpy(), np.ones((2, 2)))
        eigs = np.linalg.eigvalsh(gram.numpy())
        assert abs(eigs[0]) < 1e-12

    def test_psd_random_points(self):
        rng = np.random.default_rng(2)
        params = KernelParameters.create(5)
        Z = rng.normal(size=(50, 8))
        u = rng.uniform(-1.0, 1.0, 50)
        gram = normalized_gram(as_tensor(Z), as_tensor(u), params)
        assert np.linalg.eigvalsh(gram.numpy()).min() >= -1e-8

    def test_jitter_escalation_recovers_duplicates(self):
        z = np.array([[1.0, -0.5], [1.0, -0.5]])
        gram = gram_matrix(z, np.zeros(2), KernelParameters.create(5), jitter=0.0)
        assert float(gram[0, 0]) > 1.0  # escalated jitter added
        np.linalg.cholesky(gram.numpy())

    def test_cholesky_failure_raises(self):
        bad = torch.full((2, 2), float("nan"), dtype=torch.float64)
        with pytest.raises(NumericalFailureError):
            _cholesky_with_escalation(bad, 1e-6)


class TestLinearMean:
    def test_zero_weight(self):
        assert float(linear_mean(np.array([3.0, -2.0]),
                                 MeanParameters.zeros(2))) == 0.0

    def test_simple_dot(self):
        value = linear_mean(np.array([2.0, 3.0]), MeanParameters([1.0, 1.0]))
        assert float(value) == 5.0

    def test_matches_loop(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=6)
        x = rng.normal(size=6)
        value = float(linear_mean(x, MeanParameters(w)))
        assert abs(value - sum(a * b for a, b in zip(w, x))) < 1e-14

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            linear_mean(np.ones(3), MeanParameters.zeros(2))


class TestGpPosterior:
    def test_empty_observations_prior(self):
        post = gp_posterior(np.array([[0.2, 0.4], [1.0, -1.0]]), np.zeros(2),
                            kernel=KernelParameters.create(5),
                            mean=MeanParameters.zeros(2), jitter=1e-6)
        assert torch.allclose(post.mean, torch.zeros(2, dtype=torch.float64))
        assert torch.allclose(post.variance,
                              torch.full((2,), 1.0 + 1e-6, dtype=torch.float64))

    def test_single_observation_closed_form(self):
        z = np.array([[1.0, 2.0]])
        for j in (1e-1, 1e-3, 1e-6):
            post = gp_posterior(z, np.zeros(1), z, np.zeros(1), np.array([0.8]),
                                kernel=KernelParameters.create(5),
                                mean=MeanParameters.zeros(2), jitter=j)
            assert abs(float(post.mean[0]) - 0.8 / (1 + j)) < 1e-12
            assert abs(float(post.variance[0]) - (1 - 1 / (1 + j) + j)) < 1e-12

    def test_interpolates_against_dense_solve_oracle(self):
        rng = np.random.default_rng(4)
        params = KernelParameters(np.log(rng.uniform(0.5, 2.0, 5)))
        mean = MeanParameters(rng.normal(size=3) * 0.1)
        Z = rng.normal(size=(5, 3))
        u = rng.uniform(-0.5, 0.5, 5)
        y = rng.normal(size=5)
        queries = rng.normal(size=(4, 3))
        qu = rng.uniform(-0.5, 0.5, 4)
        jitter = 1e-6
        post = gp_posterior(queries, qu, Z, u, y, kernel=params, mean=mean,
                            jitter=jitter)
        gram = normalized_gram(as_tensor(Z), as_tensor(u), params).numpy()
        gram += jitter * np.eye(5)
        k_cross = np.array([[float(normalized_kernel(q, z, uq, uz, params))
                             for z, uz in zip(Z, u)]
                            for q, uq in zip(queries, qu)])
        resid = y - Z @ mean.weight.numpy()
        mean_oracle = queries @ mean.weight.numpy() + k_cross @ np.linalg.solve(gram, resid)
        var_oracle = np.exp(2 * qu) + jitter \
            - np.einsum("ij,ij->i", k_cross, np.linalg.solve(gram, k_cross.T).T)
        assert np.abs(post.mean.numpy() - mean_oracle).max() < 1e-9
        assert np.abs(post.variance.numpy() - var_oracle).max() < 1e-9

    def test_full_covariance_diagonal_matches_variance(self):
        rng = np.random.default_rng(5)
        Z = rng.normal(size=(4, 2))
        y = rng.normal(size=4)
        post = gp_posterior(Z, np.zeros(4), Z, np.zeros(4), y,
                            kernel=KernelParameters.create(5),
                            mean=MeanParameters.zeros(2), jitter=1e-6,
                            full_cov=True)
        assert post.covariance is not None
        diag = torch.diagonal(post.covariance)
        assert (diag - post.variance).abs().max() < 1e-10

    def test_batched_matches_single_with_padding(self):
        rng = np.random.default_rng(6)
        params = KernelParameters.create(5)
        mean = MeanParameters.zeros(2)
        Z = rng.normal(size=(4, 2))
        u = rng.uniform(-0.3, 0.3, 4)
        y = rng.normal(size=4)
        q = rng.normal(size=(3, 2))
        qu = rng.uniform(-0.3, 0.3, 3)
        single = gp_posterior(q, qu, Z, u, y, kernel=params, mean=mean, jitter=1e-6)
        # pad observations with garbage behind the mask
        zp = np.concatenate([Z, 99.0 * np.ones((2, 2))])
        up = np.concatenate([u, np.ones(2)])
        yp = np.concatenate([y, np.ones(2) * 55.0])
        mask = torch.tensor([[True] * 4 + [False] * 2])
        bm, bv = gp_posterior_batched(q[None], qu[None], zp[None], up[None],
                                      yp[None], mask, kernel=params, mean=mean,
                                      jitter=1e-6)
        assert (bm[0] - single.mean).abs().max() < 1e-10
        assert (bv[0] - single.variance).abs().max() < 1e-10


class TestLogPredictiveDensity:
    def test_normalizing_constant_cancels(self):
        post = GaussianPosterior(mean=torch.zeros(1, dtype=torch.float64),
                                 variance=torch.full((1,), 1 / (2 * math.pi),
                                                     dtype=torch.float64))
        assert abs(float(log_predictive_density(post, [0.0]))) < 1e-12

    def test_maximal_at_mean(self):
        post = GaussianPosterior(mean=torch.tensor([1.5], dtype=torch.float64),
                                 variance=torch.tensor([0.3], dtype=torch.float64))
        at_mean = float(log_predictive_density(post, [1.5]))
        for y in (1.0, 1.4, 2.1):
            assert float(log_predictive_density(post, [y])) < at_mean

    def test_matches_formula(self):
        rng = np.random.default_rng(7)
        mu = rng.normal(size=4)
        var = rng.uniform(0.1, 2.0, 4)
        y = rng.normal(size=4)
        post = GaussianPosterior(mean=as_tensor(mu), variance=as_tensor(var))
        expected = sum(-0.5 * math.log(2 * math.pi * v) - (yy - m) ** 2 / (2 * v)
                       for m, v, yy in zip(mu, var, y))
        assert abs(float(log_predictive_density(post, y)) - expected) < 1e-12

    def test_zero_variance_rejected(self):
        post = GaussianPosterior(mean=torch.zeros(1, dtype=torch.float64),
                                 variance=torch.zeros(1, dtype=torch.float64))
        with pytest.raises(DegenerateDensityError):
            log_predictive_density(post, [0.0])


class TestStandardization:
    def test_observation_set_stats(self):
        obs = ObservationSet.from_data(np.zeros((3, 2)), [1.0, 2.0, 3.0])
        assert obs.y_mean == 2.0
        std = obs.standardized_y()
        assert abs(std.mean()) < 1e-12 and abs(std.std() - 1.0) < 1e-12

    def test_single_observation_uses_unit_scale(self):
        obs = ObservationSet.from_data(np.zeros((1, 2)), [4.2])
        assert obs.y_scale == 1.0 and obs.y_mean == 4.2

    def test_affine_equivariance_of_predictions(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(5, 2))
        y = rng.normal(size=5)
        q = rng.normal(size=(3, 2))
        kernel, mean = KernelParameters.create(5), MeanParameters.zeros(2)
        base = classical_posterior(q, ObservationSet.from_data(X, y), kernel, mean)
        a, b = -3.0, 2.5
        shifted = classical_posterior(
            q, ObservationSet.from_data(X, a + b * y), kernel, mean)
        assert np.abs(shifted.mean.numpy() - (a + b * base.mean.numpy())).max() < 1e-10
        assert np.abs(shifted.variance.numpy() - b ** 2 * base.variance.numpy()).max() < 1e-10

    def test_destandardize_roundtrip(self):
        post = GaussianPosterior(mean=torch.tensor([0.5], dtype=torch.float64),
                                 variance=torch.tensor([2.0], dtype=torch.float64))
        raw = destandardize(post, y_mean=3.0, y_scale=4.0)
        back_mean = (raw.mean - 3.0) / 4.0
        back_var = raw.variance / 16.0
        assert (back_mean - post.mean).abs().max() < 1e-10
        assert (back_var - post.variance).abs().max() < 1e-10

    def test_masked_standardization_matches_observation_set(self):
        rng = np.random.default_rng(9)
        y = rng.normal(size=6)
        obs = ObservationSet.from_data(np.zeros((6, 1)), y)
        ys = torch.tensor(np.concatenate([y, [99.0, 99.0]])[None])
        mask = torch.tensor([[True] * 6 + [False] * 2])
        std = standardize_masked(ys, mask)[0, :6].numpy()
        assert np.abs(std - obs.standardized_y()).max() < 1e-12


class TestHyperparameterFitting:
    def _sample_from_prior(self, rng, alpha, n=12, d=3):
        X = rng.normal(size=(n, d))
        params = KernelParameters(np.log(alpha))
        gram = normalized_gram(as_tensor(X), torch.zeros(n, dtype=torch.float64),
                               params).numpy() + 1e-6 * np.eye(n)
        y = np.linalg.cholesky(gram) @ rng.normal(size=n)
        return ObservationSet.from_data(X, y)

    def test_zero_steps_keeps_parameters(self):
        rng = np.random.default_rng(10)
        obs = self._sample_from_prior(rng, np.ones(5))
        init = KernelParameters(np.array([0.3, -0.1, 0.2, 0.0, -0.4]))
        mean = MeanParameters(np.array([0.1, -0.2, 0.05]))
        kernel2, mean2 = fit_gp_hyperparameters(obs, init, mean, steps=0)
        assert torch.equal(kernel2.log_alpha, init.log_alpha)
        assert torch.equal(mean2.weight, mean.weight)

    def test_likelihood_never_decreases(self):
        rng = np.random.default_rng(11)
        obs = self._sample_from_prior(rng, np.array([2.0, 0.5, 1.0, 0.2, 0.1]))
        init = KernelParameters.create(5)
        mean = MeanParameters.zeros(3)
        before = float(log_marginal_likelihood(obs, init, mean))
        kernel2, mean2 = fit_gp_hyperparameters(obs, init, mean, steps=50)
        after = float(log_marginal_likelihood(obs, kernel2, mean2))
        assert after >= before - 1e-6

    def test_recovers_generating_likelihood_within_5_percent(self):
        rng = np.random.default_rng(12)
        alpha_true = np.array([2.5, 0.3, 1.5, 0.1, 0.8])
        obs = self._sample_from_prior(rng, alpha_true, n=16)
        lml_true = float(log_marginal_likelihood(
            obs, KernelParameters(np.log(alpha_true)), MeanParameters.zeros(3)))
        kernel2, mean2 = fit_gp_hyperparameters(obs, KernelParameters.create(5),
                                                MeanParameters.zeros(3), steps=100)
        lml_fit = float(log_marginal_likelihood(obs, kernel2, mean2))
        assert lml_fit >= lml_true - 0.05 * abs(lml_true)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        obs = self._sample_from_prior(rng, np.ones(5), n=6)
        log_alpha = torch.zeros(5, dtype=torch.float64, requires_grad=True)
        weight = torch.full((3,), 0.1, dtype=torch.float64, requires_grad=True)

        def lml(la, w):
            return log_marginal_likelihood(obs, KernelParameters(la),
                                           MeanParameters(w))

        value = lml(log_alpha, weight)
        grad_la, grad_w = torch.autograd.grad(value, [log_alpha, weight])
        step = 1e-4
        for tensor, grad in ((log_alpha, grad_la), (weight, grad_w)):
            for i in range(tensor.numel()):
                with torch.no_grad():
                    tensor.view(-1)[i] += step
                    up = float(lml(log_alpha, weight))
                    tensor.view(-1)[i] -= 2 * step
                    down = float(lml(log_alpha, weight))
                    tensor.view(-1)[i] += step
                fd = (up - down) / (2 * step)
                an = float(grad.view(-1)[i])
                assert abs(an - fd) <= 1e-6 + 1e-3 * max(abs(an), abs(fd))

    def test_requires_two_observations(self):
        obs = ObservationSet.from_data(np.zeros((1, 2)), [1.0])
        with pytest.raises(ShapeError):
            fit_gp_hyperparameters(obs, KernelParameters.create(5),
                                   MeanParameters.zeros(2), steps=5)


class TestClassicalFitReuse:
    def test_fit_object_matches_one_shot(self):
        rng = np.random.default_rng(14)
        X = rng.normal(size=(6, 2))
        y = rng.normal(size=6)
        obs = ObservationSet.from_data(X, y)
        kernel, mean = KernelParameters.create(5), MeanParameters.zeros(2)
        fit = ClassicalGpFit(obs, kernel, mean)
        q = rng.normal(size=(3, 2))
        a = fit.posterior(q)
        b = classical_posterior(q, obs, kernel, mean)
        assert torch.equal(a.mean, b.mean)
        assert torch.equal(a.variance, b.variance)
