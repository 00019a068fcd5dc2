"""Dense reference computations for small models.

Everything here materializes full Jacobians and P x P or NC x NC matrices, so it
is gated to ``P <= 1e5`` and ``NC <= 5e3``. These routines are the ground truth
the sketch-based posterior is checked against: exact LLA kernels (weight-space
and function-space routes), diagonal and last-layer baselines, the implied
weight-space covariance of the sketch, the approximation-error bounds, and
Gaussian KL divergences.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import FlatParams, forward, init_params, jacobian, mlp
from .likelihoods import LikelihoodHead, lambda_hessian
from .linalg import block_diag, spd_inverse, spectral_norm, symmetrize
from .nystrom import distinct_landmarks, landmark_jacobian
from .posterior import PredictiveGaussian, predict_f, woodbury_inner

MAX_P = 100_000
MAX_NC = 5_000


def _gate(P: int, NC: int) -> None:
    if P > MAX_P:
        raise ValueError(f"dense oracle limited to P <= {MAX_P}, got {P}")
    if NC > MAX_NC:
        raise ValueError(f"dense oracle limited to NC <= {MAX_NC}, got {NC}")


@dataclass(frozen=True, eq=False)
class DenseJacobian:
    """Stacked Jacobian ``(N*C, P)``; row ``i*C + c`` is the gradient of output ``c`` at ``x_i``."""

    matrix: np.ndarray
    C: int

    def row(self, i: int, c: int) -> int:
        return i * self.C + c


def dense_jacobian(params: FlatParams, X, chunk: int = 256) -> DenseJacobian:
    X = np.asarray(X, dtype=float)
    C = params.arch.output_dim
    _gate(params.P, X.shape[0] * C)
    parts = [jacobian(params, X[s:s + chunk]) for s in range(0, X.shape[0], chunk)]
    J = np.concatenate(parts) if parts else np.zeros((0, C, params.P))
    return DenseJacobian(J.reshape(-1, params.P), C)


# --------------------------------------------------------------------------
# covariance in weight space


def ggn(J_X: np.ndarray, lam_X: np.ndarray) -> np.ndarray:
    return symmetrize(J_X.T @ lam_X @ J_X)


def sigma_direct(J_X, lam_X, sigma0_sq: float) -> np.ndarray:
    """``[J^T Lambda J + I/sigma0^2]^{-1}`` by direct inversion."""
    P = J_X.shape[1]
    return spd_inverse(ggn(J_X, lam_X) + np.eye(P) / sigma0_sq)


def sigma_woodbury(J_X, lam_X, sigma0_sq: float) -> np.ndarray:
    """``sigma0^2 (I - J^T [Lambda^{-1}/sigma0^2 + J J^T]^{-1} J)``."""
    P = J_X.shape[1]
    Q = woodbury_inner(lam_X, J_X @ J_X.T, sigma0_sq)
    return sigma0_sq * (np.eye(P) - J_X.T @ Q @ J_X)


def kappa_lla_primal(J_X, lam_X, sigma0_sq, Jx, Jxp) -> np.ndarray:
    """``J(x) Sigma J(x')^T`` with ``Sigma`` inverted in parameter space."""
    return Jx @ sigma_direct(J_X, lam_X, sigma0_sq) @ Jxp.T


def kappa_lla_kernel(J_X, lam_X, sigma0_sq, Jx, Jxp) -> np.ndarray:
    """Function-space form ``sigma0^2 (k(x,x') - k(x,X)[Lambda^{-1}/sigma0^2 + k(X,X)]^{-1} k(X,x'))``."""
    if J_X.shape[0] == 0:
        return sigma0_sq * Jx @ Jxp.T
    Q = woodbury_inner(lam_X, J_X @ J_X.T, sigma0_sq)
    kxX = Jx @ J_X.T
    kXxp = J_X @ Jxp.T
    return sigma0_sq * (Jx @ Jxp.T - kxX @ Q @ kXxp)


def kappa_lla_exact(J_X, lam_X, sigma0_sq, Jx, Jxp, route: str = "kernel") -> np.ndarray:
    """Exact LLA kernel between two inputs given their ``(C, P)`` Jacobians."""
    _gate(J_X.shape[1], J_X.shape[0])
    if route == "kernel":
        return kappa_lla_kernel(J_X, lam_X, sigma0_sq, Jx, Jxp)
    if route == "primal":
        return kappa_lla_primal(J_X, lam_X, sigma0_sq, Jx, Jxp)
    raise ValueError(f"unknown route {route!r}")


def sigma_diag(J_X, lam_X, sigma0_sq) -> np.ndarray:
    """Diagonal of the diagonal-GGN covariance ``1 / (diag(J^T Lambda J) + 1/sigma0^2)``."""
    d = np.einsum("np,np->p", lam_X @ J_X, J_X) if J_X.shape[0] else np.zeros(J_X.shape[1])
    return 1.0 / (d + 1.0 / sigma0_sq)


def kappa_lla_diag(J_X, lam_X, sigma0_sq, Jx, Jxp) -> np.ndarray:
    return (Jx * sigma_diag(J_X, lam_X, sigma0_sq)) @ Jxp.T


def kappa_lla_lastlayer(J_X, lam_X, sigma0_sq, Jx, Jxp, cols: slice) -> np.ndarray:
    """Exact LLA restricted to the parameter columns ``cols`` (the final dense layer)."""
    return kappa_lla_kernel(J_X[:, cols], lam_X, sigma0_sq, Jx[:, cols], Jxp[:, cols])


# --------------------------------------------------------------------------
# sketch in weight space and the error bounds


def landmark_projector(J_landmarks) -> np.ndarray:
    """``J_m^T (J_m J_m^T)^{-1} J_m``, the orthogonal projector onto the landmark row space."""
    Jm = np.asarray(J_landmarks)
    Kmat = symmetrize(Jm @ Jm.T)
    return symmetrize(Jm.T @ np.linalg.solve(Kmat, Jm))


def sigma_prime(J_landmarks, J_X, lam_X, sigma0_sq) -> np.ndarray:
    """Weight-space covariance implied by the sketch when every landmark is kept.

    ``J_m^T [J_m J_X^T Lambda J_X J_m^T + J_m J_m^T / sigma0^2]^{-1} J_m``
    """
    Jm = np.asarray(J_landmarks)
    A = Jm @ J_X.T
    inner = symmetrize(A @ lam_X @ A.T + Jm @ Jm.T / sigma0_sq)
    return symmetrize(Jm.T @ np.linalg.solve(inner, Jm))


@dataclass
class TheoremInstance:
    J_X: np.ndarray
    lam_X: np.ndarray
    J_landmarks: np.ndarray
    sigma0_sq: float
    c_lambda: float
    N: int
    C: int


@dataclass
class TheoremBoundReport:
    E: float
    eps_prime: float
    c_lambda: float
    lambda_norm: float
    c_kappa: float
    lambda_tilde_M1: float
    delta: float
    sigma0_sq: float
    N: int
    C: int
    M: int
    P: int
    bound_thm0: float
    bound_nystrom: float
    bound_corollary: float
    holds_thm0: bool
    holds_nystrom: bool
    holds_corollary: bool
    holds_c_lambda: bool

    def to_dict(self) -> dict:
        return asdict(self)


def check_theorem_bounds(inst: TheoremInstance, delta: float = 0.1) -> TheoremBoundReport:
    """Evaluate both sides of the deterministic bound and of the probabilistic ones.

    ``holds_thm0`` tests ``E <= sigma0^4 c_lambda eps' + sigma0^2`` (+1e-8 slack
    for rounding). The Nystrom and corollary bounds hold only with
    probability ``1 - delta``; their flags are reported, not asserted.
    """
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    J_X, Jm = inst.J_X, inst.J_landmarks
    M, P = Jm.shape
    NC = J_X.shape[0]
    s2 = inst.sigma0_sq
    Sigma = sigma_direct(J_X, inst.lam_X, s2)
    Sp = sigma_prime(Jm, J_X, inst.lam_X, s2)
    E = spectral_norm(symmetrize(Sp - Sigma))
    kern = symmetrize(J_X @ J_X.T)
    Pm = landmark_projector(Jm)
    eps_prime = spectral_norm(symmetrize(J_X @ Pm @ J_X.T - kern))
    w = np.sort(np.linalg.eigvalsh(kern))[::-1] if NC else np.zeros(0)
    lam_M1 = float(w[M]) if M < NC else 0.0
    c_kappa = float(np.max(np.diag(kern))) if NC else 0.0
    lam_norm = spectral_norm(symmetrize(inst.lam_X)) if NC else 0.0
    thm0 = s2 ** 2 * inst.c_lambda * eps_prime + s2
    nys = lam_M1 + NC / np.sqrt(M) * c_kappa * (2.0 + np.log(1.0 / delta))
    coro = s2 ** 2 * inst.c_lambda * nys + s2
    return TheoremBoundReport(
        E=E, eps_prime=eps_prime, c_lambda=inst.c_lambda, lambda_norm=lam_norm,
        c_kappa=c_kappa, lambda_tilde_M1=lam_M1, delta=delta, sigma0_sq=s2,
        N=inst.N, C=inst.C, M=M, P=P, bound_thm0=thm0, bound_nystrom=nys, bound_corollary=coro,
        holds_thm0=bool(E <= thm0 + 1e-8), holds_nystrom=bool(eps_prime <= nys + 1e-8),
        holds_corollary=bool(E <= coro + 1e-8),
        holds_c_lambda=bool(lam_norm <= inst.c_lambda + 1e-12))


def random_theorem_instance(rng: np.random.Generator, max_P: int = 60, max_N: int = 20,
                            max_C: int = 3) -> TheoremInstance:
    """A random small tanh MLP with random data, head, prior and ``M`` distinct landmarks."""
    while True:
        C = int(rng.integers(1, max_C + 1))
        d = int(rng.integers(1, 4))
        h = int(rng.integers(2, 9))
        arch = mlp(d, [h], C, "tanh")
        if arch.n_params <= max_P:
            break
    N = int(rng.integers(1, max_N + 1))
    params = init_params(arch, int(rng.integers(2 ** 31)))
    X = rng.standard_normal((N, d))
    if rng.random() < 0.5:
        head = LikelihoodHead.categorical(C)
        Y = rng.integers(0, C, size=N)
    else:
        head = LikelihoodHead.gaussian(float(10 ** rng.uniform(-1, 0.5)), C)
        Y = rng.standard_normal((N, C))
    lam = block_diag(lambda_hessian(forward(params, X), Y, head))
    J_X = dense_jacobian(params, X).matrix
    sigma0_sq = float(10 ** rng.uniform(-2, 1))
    # the bound needs an invertible landmark gram: cap M by the numerical rank
    rank = np.linalg.matrix_rank(J_X, tol=1e-6 * max(np.linalg.norm(J_X, 2), 1e-300))
    M = int(rng.integers(1, max(rank, 1) + 1))
    while True:
        lm = distinct_landmarks(N, C, M, int(rng.integers(2 ** 31)))
        Jm = landmark_jacobian(params, X, lm)
        if np.linalg.cond(Jm @ Jm.T) < 1e8:
            break
        M = max(1, M - 1)
    return TheoremInstance(J_X, lam, Jm, sigma0_sq, head.c_lambda, N, C)


# --------------------------------------------------------------------------
# comparisons


def kl_gaussian(p: PredictiveGaussian, q: PredictiveGaussian, jitter: float = 1e-12) -> float:
    """``KL(p || q)`` for two Gaussians; ``jitter * I`` is added to ``q``'s covariance."""
    m1 = np.atleast_1d(np.asarray(p.mean, dtype=float))
    m2 = np.atleast_1d(np.asarray(q.mean, dtype=float))
    k = m1.shape[0]
    S1 = np.asarray(p.covariance, dtype=float).reshape(k, k)
    S2 = np.asarray(q.covariance, dtype=float).reshape(k, k) + jitter * np.eye(k)
    L2 = np.linalg.cholesky(symmetrize(S2))
    sign1, logdet1 = np.linalg.slogdet(S1)
    if sign1 <= 0:
        return float("inf")
    logdet2 = 2 * np.sum(np.log(np.diag(L2)))
    A = np.linalg.solve(L2, S1)
    tr = np.trace(np.linalg.solve(L2.T, A))
    r = np.linalg.solve(L2, m2 - m1)
    kl = 0.5 * (tr + r @ r - k + logdet2 - logdet1)
    return float(max(kl, 0.0))


class LlaOracle:
    """Dense Jacobians and exact LLA quantities for one trained model and dataset."""

    def __init__(self, params: FlatParams, X, Y, head: LikelihoodHead, sigma0_sq: float):
        self.params = params
        self.X = np.asarray(X, dtype=float)
        self.head = head
        self.sigma0_sq = float(sigma0_sq)
        self.J_X = dense_jacobian(params, self.X).matrix
        g = forward(params, self.X) if len(self.X) else np.zeros((0, params.arch.output_dim))
        self.lam_X = (block_diag(lambda_hessian(g, Y, head)) if len(self.X)
                      else np.zeros((0, 0)))
        self._Q = (woodbury_inner(self.lam_X, self.J_X @ self.J_X.T, self.sigma0_sq)
                   if len(self.X) else None)

    def jac(self, x) -> np.ndarray:
        return jacobian(self.params, x)

    def kappa(self, x, x_prime=None) -> np.ndarray:
        """Exact LLA kernel; batched inputs give ``(B, C, C)`` diagonal blocks."""
        Jx = self.jac(x)
        Jxp = Jx if x_prime is None else self.jac(x_prime)
        if Jx.ndim == 2:
            return self._kappa(Jx, Jxp)
        return np.stack([self._kappa(a, b) for a, b in zip(Jx, Jxp)])

    def _kappa(self, Jx, Jxp):
        out = Jx @ Jxp.T
        if self._Q is not None:
            out = out - (Jx @ self.J_X.T) @ self._Q @ (self.J_X @ Jxp.T)
        return self.sigma0_sq * out

    def kappa_diag(self, x) -> np.ndarray:
        d = sigma_diag(self.J_X, self.lam_X, self.sigma0_sq)
        Jx = self.jac(x)
        return np.matmul(Jx * d, np.swapaxes(Jx, -1, -2))

    def kappa_lastlayer(self, x) -> np.ndarray:
        cols = self.params.arch.last_dense_slice()
        Jx = self.jac(x)
        if Jx.ndim == 2:
            return kappa_lla_lastlayer(self.J_X, self.lam_X, self.sigma0_sq, Jx, Jx, cols)
        JL = self.J_X[:, cols]
        Q = (woodbury_inner(self.lam_X, JL @ JL.T, self.sigma0_sq) if len(self.X) else None)
        out = []
        for a in Jx[:, :, cols]:
            k = a @ a.T
            if Q is not None:
                k = k - (a @ JL.T) @ Q @ (JL @ a.T)
            out.append(self.sigma0_sq * k)
        return np.stack(out)

    def sigma(self) -> np.ndarray:
        return sigma_direct(self.J_X, self.lam_X, self.sigma0_sq)

    def predictive(self, x, method: str = "exact") -> PredictiveGaussian:
        mean = forward(self.params, x)
        cov = {"exact": self.kappa, "diag": self.kappa_diag,
               "lastlayer": self.kappa_lastlayer}[method](x)
        return PredictiveGaussian(mean, cov)


def mean_relative_cov_error(approx_cov, exact_cov) -> float:
    """Mean over inputs of ``||approx(x) - exact(x)|| / ||exact(x)||`` (spectral norms)."""
    errs = [spectral_norm(symmetrize(a - b)) / spectral_norm(symmetrize(b))
            for a, b in zip(np.asarray(approx_cov), np.asarray(exact_cov))]
    return float(np.mean(errs))


def epsilon_ella(post, params: FlatParams, oracle: LlaOracle, X_val) -> float:
    """Mean relative spectral error of the sketch posterior covariance against exact LLA."""
    ella_cov = predict_f(post, params, X_val).covariance
    return mean_relative_cov_error(ella_cov, oracle.kappa(X_val))
