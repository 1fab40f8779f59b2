import math

import numpy as np
import pytest
import torch

from pnlcausal.gp_core import (ExactGpModel, IllConditionedKernel, SeKernel, exact_log_marginal,
                               fit_anm, gram, jittered_cholesky, posterior_mean, posterior_var)
from pnlcausal.hsic import hsic_test
from pnlcausal.optim import FitConfig


def test_gram_examples():
    k1 = SeKernel(0.0)
    np.testing.assert_array_equal(gram(k1, [0.0], [0.0]), [[1.0]])
    assert gram(k1, [0.0], [1.0])[0, 0] == pytest.approx(math.exp(-0.5), abs=1e-15)
    k2 = SeKernel(math.log(2.0))
    pts = [0.0, 1.0, 2.0]
    brute = [[math.exp(-(a - b) ** 2 / 8.0) for b in pts] for a in pts]
    np.testing.assert_allclose(gram(k2, pts, pts), brute, atol=1e-12)


def test_gram_symmetric_psd(rng):
    for _ in range(20):
        x = rng.normal(0, 2, 40)
        k = gram(SeKernel(rng.normal()), x, x)
        np.testing.assert_array_equal(k, k.T)
        assert np.linalg.eigvalsh(k).min() >= -1e-8
        assert np.all(np.diag(k) == 1.0)


def test_gram_rejects_non_finite():
    with pytest.raises(ValueError):
        gram(SeKernel(), [np.nan], [0.0])


def test_exact_lml_single_point():
    model = ExactGpModel(SeKernel(0.0), 0.0, [0.0], [0.0])
    want = -0.5 * math.log(2 * math.pi) - 0.5 * math.log(2.0)
    assert exact_log_marginal(model) == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(-1.2655, abs=1e-4)


def test_exact_lml_independence_limit():
    s2 = 0.3
    y = np.array([0.7, -1.1])
    model = ExactGpModel(SeKernel(0.0), math.log(s2), [0.0, 100.0], y)
    v = 1 + s2
    want = np.sum(-0.5 * np.log(2 * math.pi * v) - 0.5 * y ** 2 / v)
    assert exact_log_marginal(model) == pytest.approx(want, abs=1e-6)


def test_exact_lml_permutation_invariant(rng):
    x, y = rng.normal(size=30), rng.normal(size=30)
    perm = rng.permutation(30)
    a = exact_log_marginal(ExactGpModel(SeKernel(0.2), -1.0, x, y))
    b = exact_log_marginal(ExactGpModel(SeKernel(0.2), -1.0, x[perm], y[perm]))
    assert a == pytest.approx(b, abs=1e-10)


def test_jitter_stability(rng):
    x = rng.normal(size=25)
    y = np.sin(x) + math.sqrt(0.1) * rng.normal(size=25)
    base = exact_log_marginal(ExactGpModel(SeKernel(0.0), math.log(0.1), x, y))
    for delta in (1e-8, 1e-7, 1e-6):
        bumped = exact_log_marginal(ExactGpModel(SeKernel(0.0), math.log(0.1 + delta), x, y))
        assert abs(bumped - base) < 10 * delta * 25


def test_jittered_cholesky_escalates_and_fails():
    near = torch.tensor([[1.0, 1.0], [1.0, 1.0 - 1e-12]], dtype=torch.float64)
    chol = jittered_cholesky(near)
    assert torch.all(torch.diagonal(chol) > 0)
    with pytest.raises(IllConditionedKernel, match="ill-conditioned kernel"):
        jittered_cholesky(torch.tensor([[1.0, 0.0], [0.0, -1.0]], dtype=torch.float64))


def test_posterior_mean_limits():
    x = np.array([-2.0, 0.0, 2.0])
    y = np.array([0.5, -0.3, 1.2])
    model = ExactGpModel(SeKernel(0.0), math.log(1e-10), x, y)
    np.testing.assert_allclose(posterior_mean(model, x), y, atol=1e-4)
    far = posterior_mean(model, [2.0 + 20.0])
    assert abs(far[0]) < 1e-3
    assert posterior_var(model, [22.0])[0] == pytest.approx(1.0, abs=1e-6)


def test_posterior_mean_matches_direct_solve(rng):
    x, y = rng.normal(size=40), rng.normal(size=40)
    model = ExactGpModel(SeKernel(-0.3), math.log(0.2), x, y)
    xs = np.linspace(-3, 3, 17)
    k = gram(model.kernel, x, x) + 0.2 * np.eye(40)
    direct = gram(model.kernel, xs, x) @ np.linalg.solve(k, y)
    np.testing.assert_allclose(posterior_mean(model, xs), direct, atol=1e-8)


def test_fit_anm_recovers_sine():
    rng = np.random.default_rng(0)
    x = rng.uniform(-3, 3, 200)
    y = np.sin(x) + 0.1 * rng.standard_normal(200)
    result = fit_anm(x, y, FitConfig(), 0)
    grid = np.linspace(-2.8, 2.8, 100)
    rmse = np.sqrt(np.mean((result.predict_mean(grid) - np.sin(grid)) ** 2))
    assert rmse < 0.1
    assert abs(result.residuals.mean()) < 0.05
    assert result.per_sample == pytest.approx(result.objective / 200)


@pytest.mark.slow
def test_fit_anm_pure_noise_residuals_independent():
    passes = 0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        x = rng.standard_normal(100)
        y = rng.standard_normal(100)
        x, y = (x - x.mean()) / x.std(), (y - y.mean()) / y.std()
        result = fit_anm(x, y, FitConfig(), seed)
        passes += hsic_test(x, result.residuals).p_value > 0.05
        assert abs(result.residuals.mean()) < 0.05
    assert passes >= 18


def test_fit_anm_validation():
    with pytest.raises(ValueError):
        fit_anm([0.0, 1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        ExactGpModel(SeKernel(), 0.0, [0.0, 1.0], [1.0])
