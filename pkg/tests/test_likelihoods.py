import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ella.autodiff import forward, init_params, mlp
from ella.data import gen_sine_regression
from ella.likelihoods import (LikelihoodHead, PriorConfig, TrainConfig, TrainingDiverged,
                              lambda_hessian, nll, nll_grad, objective, prior_variance, train_map)

logits = arrays(np.float64, st.integers(1, 6), elements=st.floats(-30, 30))


def test_gaussian_nll_zero_at_target():
    head = LikelihoodHead.gaussian(1.0, C=2)
    assert nll(np.array([0.3, -1.0]), np.array([0.3, -1.0]), head) == 0.0


def test_gaussian_nll_constant_included_on_request():
    head = LikelihoodHead.gaussian(0.5)
    v = nll(np.array([1.0]), np.array([0.0]), head, include_constant=True)
    assert v == pytest.approx(1.0 + 0.5 * math.log(2 * math.pi * 0.5), abs=1e-15)


def test_categorical_uniform_two_class():
    head = LikelihoodHead.categorical(2)
    assert nll(np.zeros(2), 1, head) == pytest.approx(math.log(2), abs=1e-15)


def test_categorical_matches_direct_sum(rng):
    head = LikelihoodHead.categorical(5)
    for _ in range(50):
        g = 3 * rng.standard_normal(5)
        y = int(rng.integers(5))
        ref = math.log(sum(math.exp(v) for v in g)) - g[y]
        assert abs(nll(g, y, head) - ref) < 1e-12


def test_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        nll(np.zeros(3), 3, LikelihoodHead.categorical(3))


def test_gaussian_hessian_scaled_identity():
    lam = lambda_hessian(np.zeros(3), np.zeros(3), LikelihoodHead.gaussian(0.04, C=3))
    np.testing.assert_allclose(lam, 25 * np.eye(3), rtol=1e-14)


def test_categorical_hessian_uniform():
    lam = lambda_hessian(np.zeros(2), 0, LikelihoodHead.categorical(2))
    np.testing.assert_allclose(lam, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-16)


def test_categorical_hessian_matches_fd(rng):
    head = LikelihoodHead.categorical(4)
    h = 1e-4
    for _ in range(5):
        g = rng.standard_normal(4)
        y = int(rng.integers(4))
        fd = np.empty((4, 4))
        for i in range(4):
            e = np.zeros(4)
            e[i] = h
            fd[i] = (nll_grad((g + e)[None], [y], head)[0] - nll_grad((g - e)[None], [y], head)[0]) / (2 * h)
        assert np.max(np.abs(lambda_hessian(g, y, head) - fd)) < 1e-6


def test_nll_grad_matches_fd(rng):
    for head in (LikelihoodHead.categorical(3), LikelihoodHead.gaussian(0.3, C=3)):
        g = rng.standard_normal(3)
        y = 1 if head.kind == "categorical" else rng.standard_normal(3)
        fd = np.array([(nll(g + e, y, head) - nll(g - e, y, head)) / 2e-6
                       for e in 1e-6 * np.eye(3)])
        np.testing.assert_allclose(nll_grad(g[None], y, head)[0], fd, atol=1e-7)


@given(logits)
def test_categorical_hessian_invariants(g):
    head = LikelihoodHead.categorical(g.shape[0])
    lam = lambda_hessian(g, 0, head)
    assert np.max(np.abs(lam - lam.T)) <= 1e-14
    w = np.linalg.eigvalsh(lam)
    assert w.min() >= -1e-10
    assert w.max() <= head.c_lambda + 1e-12
    assert np.max(np.abs(lam.sum(axis=1))) <= 1e-12


def test_degenerate_softmax_stays_psd():
    lam = lambda_hessian(np.array([600.0, -400.0, 0.0]), 0, LikelihoodHead.categorical(3))
    assert np.all(np.isfinite(lam)) and np.linalg.eigvalsh(lam).min() >= -1e-10


@pytest.mark.parametrize("N, gamma, expect", [(16, 0.05, 1.25), (2000, 1e-4, 5.0), (1, 1.0, 1.0)])
def test_prior_variance(N, gamma, expect):
    assert prior_variance(N, gamma) == pytest.approx(expect, rel=1e-15)


def test_prior_variance_rejects_zero_decay():
    with pytest.raises(ValueError, match="improper"):
        prior_variance(10, 0.0)


@given(st.integers(1, 10 ** 6), st.floats(1e-8, 1e3))
def test_prior_config_from_weight_decay(N, gamma):
    assert PriorConfig.from_weight_decay(N, gamma).sigma0_sq == 1.0 / (N * gamma)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(iterations=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")


def test_zero_lr_returns_init(rng):
    arch = mlp(1, [4], 1)
    X = rng.standard_normal((5, 1))
    out = train_map(arch, X, X, LikelihoodHead.gaussian(1.0),
                    TrainConfig(lr=0.0, iterations=1, seed=3))
    assert np.array_equal(out.values, init_params(arch, 3).values)


def test_training_improves_objective():
    arch = mlp(1, [], 1)
    X = np.array([[-1.0], [0.0], [1.0]])
    Y = 2 * X + 1
    head = LikelihoodHead.gaussian(1.0)
    cfg = TrainConfig(lr=0.05, iterations=300, weight_decay=1e-4)
    out = train_map(arch, X, Y, head, cfg)
    assert objective(out, X, Y, head, 1e-4) < objective(init_params(arch, 0), X, Y, head, 1e-4)


def test_training_is_reproducible(rng):
    arch = mlp(2, [5], 3)
    X = rng.standard_normal((12, 2))
    Y = rng.integers(0, 3, 12)
    cfg = TrainConfig(iterations=30, batch_size=5, seed=4)
    a = train_map(arch, X, Y, LikelihoodHead.categorical(3), cfg)
    b = train_map(arch, X, Y, LikelihoodHead.categorical(3), cfg)
    assert np.array_equal(a.values, b.values)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_iteration():
    arch = mlp(1, [3], 1)
    X = np.array([[1.0], [2.0]])
    with pytest.raises(TrainingDiverged) as exc:
        train_map(arch, X, 1e200 * X, LikelihoodHead.gaussian(1.0),
                  TrainConfig(optimizer="sgd", lr=1e10, iterations=50))
    assert exc.value.iteration >= 1


def test_sine_demo_fit_quality():
    ds = gen_sine_regression(16, 0)
    arch = mlp(1, [50, 50, 50], 1, "tanh")
    params = train_map(arch, ds.inputs, ds.targets, LikelihoodHead.gaussian(0.2),
                       TrainConfig(lr=1e-2, weight_decay=0.05, iterations=1000))
    rmse = np.sqrt(np.mean((forward(params, ds.inputs) - ds.targets) ** 2))
    assert rmse < 0.3
