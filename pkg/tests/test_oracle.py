import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ella.autodiff import ArchDescriptor, Dense, forward, grad_row, init_params, mlp
from ella.likelihoods import LikelihoodHead, lambda_hessian
from ella.linalg import block_diag
from ella.nystrom import all_landmarks, build_sketch, landmark_jacobian, sample_landmarks
from ella.oracle import (MAX_NC, LlaOracle, TheoremInstance, check_theorem_bounds,
                         dense_jacobian, epsilon_ella, kappa_lla_diag, kappa_lla_exact,
                         kappa_lla_lastlayer, kl_gaussian, landmark_projector,
                         mean_relative_cov_error, random_theorem_instance, sigma_direct,
                         sigma_prime, sigma_woodbury)
from ella.posterior import PredictiveGaussian, fit


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def problem(seed):
    return random_theorem_instance(np.random.default_rng(seed))


def test_dense_jacobian_rows_are_grad_rows(small_problem):
    params, X, _, _ = small_problem
    J = dense_jacobian(params, X)
    for i in (0, 3, 6):
        for c in range(3):
            np.testing.assert_allclose(J.matrix[J.row(i, c)], grad_row(params, X[i], c),
                                       rtol=0, atol=1e-14)


def test_dense_jacobian_gate():
    params = init_params(mlp(1, [2], 1), 0)
    with pytest.raises(ValueError, match="NC"):
        dense_jacobian(params, np.zeros((MAX_NC + 1, 1)))


@given(st.integers(0, 2 ** 31 - 1))
def test_sigma_direct_equals_woodbury(seed):
    inst = problem(seed)
    a = sigma_direct(inst.J_X, inst.lam_X, inst.sigma0_sq)
    b = sigma_woodbury(inst.J_X, inst.lam_X, inst.sigma0_sq)
    assert rel(b, a) < 1e-8


@given(st.integers(0, 2 ** 31 - 1))
def test_kernel_route_equals_primal_route(seed):
    inst = problem(seed)
    rng = np.random.default_rng(seed + 1)
    Jx, Jxp = (rng.standard_normal((inst.C, inst.J_X.shape[1])) for _ in range(2))
    k = kappa_lla_exact(inst.J_X, inst.lam_X, inst.sigma0_sq, Jx, Jxp, "kernel")
    p = kappa_lla_exact(inst.J_X, inst.lam_X, inst.sigma0_sq, Jx, Jxp, "primal")
    assert rel(k, p) < 1e-8
    kxx = kappa_lla_exact(inst.J_X, inst.lam_X, inst.sigma0_sq, Jx, Jx)
    assert np.linalg.eigvalsh((kxx + kxx.T) / 2).min() >= -1e-10 * np.abs(kxx).max()


def test_no_data_is_prior_gp(rng):
    Jx, Jxp = rng.standard_normal((2, 3, 10))
    empty = np.zeros((0, 10))
    for fn in (kappa_lla_exact, kappa_lla_diag):
        np.testing.assert_allclose(fn(empty, np.zeros((0, 0)), 0.4, Jx, Jxp), 0.4 * Jx @ Jxp.T,
                                   rtol=1e-13)
    np.testing.assert_allclose(kappa_lla_lastlayer(empty, np.zeros((0, 0)), 0.4, Jx, Jxp,
                                                   slice(4, 10)),
                               0.4 * Jx[:, 4:] @ Jxp[:, 4:].T, rtol=1e-13)


def test_collapsed_prior(small_problem):
    params, X, Y, head = small_problem
    oracle = LlaOracle(params, X, Y, head, 1e-12)
    assert np.abs(oracle.kappa(X[0])).max() < 1e-10


def test_random_p30_routes_agree(rng):
    arch = mlp(3, [5], 2, "tanh")
    assert arch.n_params == 32
    params = init_params(arch, 2)
    X = rng.standard_normal((6, 3))
    head = LikelihoodHead.categorical(2)
    Y = rng.integers(0, 2, 6)
    o = LlaOracle(params, X, Y, head, 0.6)
    Jx = o.jac(X[0])
    a = kappa_lla_exact(o.J_X, o.lam_X, 0.6, Jx, Jx, "kernel")
    b = kappa_lla_exact(o.J_X, o.lam_X, 0.6, Jx, Jx, "primal")
    assert rel(a, b) < 1e-8


def test_diag_equals_exact_when_ggn_diagonal():
    # columns of J_X with disjoint support make J^T Lambda J diagonal
    J_X = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 0.5]])
    lam = np.diag([1.0, 0.3, 2.0])
    Jx = np.array([[0.2, -1.0, 0.7]])
    np.testing.assert_allclose(kappa_lla_diag(J_X, lam, 1.1, Jx, Jx),
                               kappa_lla_exact(J_X, lam, 1.1, Jx, Jx), rtol=1e-12)


def test_diag_and_lastlayer_differ_on_random_instance(small_problem):
    params, X, Y, head = small_problem
    o = LlaOracle(params, X, Y, head, 1.0)
    ex = o.kappa(X[0])
    assert np.linalg.norm(o.kappa_diag(X[0]) - ex) > 1e-6
    assert np.linalg.norm(o.kappa_lastlayer(X[0]) - ex) > 1e-6


def test_lastlayer_equals_exact_for_single_dense_layer(rng):
    arch = ArchDescriptor((3,), (Dense(3, 2),))
    params = init_params(arch, 0)
    X = rng.standard_normal((4, 3))
    o = LlaOracle(params, X, rng.integers(0, 2, 4), LikelihoodHead.categorical(2), 0.9)
    np.testing.assert_allclose(o.kappa_lastlayer(X[:2]), o.kappa(X[:2]), rtol=1e-12)


def test_sigma_prime_full_data_projector_term(small_problem):
    params, X, Y, head = small_problem
    J_X = dense_jacobian(params, X).matrix
    lam = block_diag(lambda_hessian(forward(params, X), Y, head))
    s2 = 0.5
    E = np.linalg.norm(sigma_prime(J_X, J_X, lam, s2) - sigma_direct(J_X, lam, s2), 2)
    assert E <= s2 + 1e-8


def test_sigma_prime_tiny_prior_bound():
    inst = random_theorem_instance(np.random.default_rng(3))
    inst.sigma0_sq = 1e-6
    rep = check_theorem_bounds(inst)
    assert rep.holds_thm0


def test_sigma_prime_no_data():
    rng = np.random.default_rng(0)
    Jm = rng.standard_normal((2, 5))
    s2 = 0.7
    Sp = sigma_prime(Jm, np.zeros((0, 5)), np.zeros((0, 0)), s2)
    Pm = landmark_projector(Jm)
    np.testing.assert_allclose(Sp, s2 * Pm, atol=1e-12)
    E = np.linalg.norm(Sp - s2 * np.eye(5), 2)
    assert E == pytest.approx(s2 * np.linalg.norm(Pm - np.eye(5), 2), rel=1e-10)
    assert E <= s2 + 1e-12


def test_sigma_prime_decomposition(small_problem):
    # Sigma' = (P A P + I/s2)^{-1} restricted plus s2 (P - I), with P the landmark projector
    params, X, Y, head = small_problem
    J_X = dense_jacobian(params, X).matrix
    lam = block_diag(lambda_hessian(forward(params, X), Y, head))
    Jm = landmark_jacobian(params, X, sample_landmarks(len(X), 3, 5, 1))
    s2 = 0.8
    Pm = landmark_projector(Jm)
    T = np.linalg.inv(Pm @ J_X.T @ lam @ J_X @ Pm + np.eye(Pm.shape[0]) / s2)
    assert rel(sigma_prime(Jm, J_X, lam, s2), T + s2 * (Pm - np.eye(Pm.shape[0]))) < 1e-8


@given(st.integers(0, 2 ** 31 - 1))
def test_theorem_bound_always_holds(seed):
    rep = check_theorem_bounds(problem(seed))
    assert rep.holds_thm0
    assert rep.E >= 0 and rep.eps_prime >= 0 and rep.c_kappa >= 0
    assert rep.holds_thm0 == (rep.E <= rep.bound_thm0 + 1e-8)
    assert rep.holds_c_lambda


def test_full_landmarks_zero_eps_prime(small_problem):
    params, X, Y, head = small_problem
    J_X = dense_jacobian(params, X).matrix
    lam = block_diag(lambda_hessian(forward(params, X), Y, head))
    assert np.linalg.matrix_rank(J_X) == J_X.shape[0]
    inst = TheoremInstance(J_X, lam, J_X, 0.5, 2.0, len(X), 3)
    assert check_theorem_bounds(inst).eps_prime <= 1e-8


def test_delta_one_path():
    rep = check_theorem_bounds(problem(11), delta=1.0)
    assert np.isfinite(rep.bound_corollary)
    with pytest.raises(ValueError):
        check_theorem_bounds(problem(11), delta=0.0)


def test_kl_identical_and_shift():
    p = PredictiveGaussian(np.array([0.3, 1.0]), np.array([[1.0, 0.2], [0.2, 0.5]]))
    assert kl_gaussian(p, p) < 1e-10
    a = PredictiveGaussian(np.array([0.0]), np.array([[1.0]]))
    b = PredictiveGaussian(np.array([1.0]), np.array([[1.0]]))
    assert kl_gaussian(a, b) == pytest.approx(0.5, abs=1e-10)


def test_kl_against_monte_carlo(rng):
    A, B = rng.standard_normal((2, 2, 2))
    p = PredictiveGaussian(rng.standard_normal(2), A @ A.T + 0.5 * np.eye(2))
    q = PredictiveGaussian(rng.standard_normal(2), B @ B.T + 0.5 * np.eye(2))
    z = rng.multivariate_normal(p.mean, p.covariance, size=1_000_000)

    def logpdf(m, S):
        d = z - m
        Si = np.linalg.inv(S)
        return -0.5 * (np.einsum("ni,ij,nj->n", d, Si, d) + np.log(np.linalg.det(2 * np.pi * S)))

    mc = np.mean(logpdf(p.mean, p.covariance) - logpdf(q.mean, q.covariance))
    assert abs(kl_gaussian(p, q) - mc) / kl_gaussian(p, q) < 1e-2


@given(st.integers(0, 2 ** 31 - 1))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 4))
    A, B = rng.standard_normal((2, k, k))
    p = PredictiveGaussian(rng.standard_normal(k), A @ A.T + 1e-3 * np.eye(k))
    q = PredictiveGaussian(rng.standard_normal(k), B @ B.T + 1e-3 * np.eye(k))
    assert kl_gaussian(p, q) >= 0
    assert kl_gaussian(p, p) <= 1e-10


def test_epsilon_ella_zero_and_positive(small_problem, rng):
    params, X, Y, head = small_problem
    oracle = LlaOracle(params, X, Y, head, 1.0)
    J_lm = landmark_jacobian(params, X, all_landmarks(len(X), 3))
    full = fit(build_sketch(J_lm, int(np.linalg.matrix_rank(J_lm))), params, X, Y, head, 1.0)
    Xv = rng.standard_normal((5, 2))
    assert epsilon_ella(full, params, oracle, X) < 1e-8
    low = fit(build_sketch(J_lm, 4), params, X, Y, head, 1.0)
    assert epsilon_ella(low, params, oracle, Xv) > 1e-3


def test_mean_relative_cov_error_by_hand():
    a = np.stack([2 * np.eye(2), np.eye(2)])
    b = np.stack([np.eye(2), np.eye(2)])
    assert mean_relative_cov_error(a, b) == pytest.approx(0.5)
