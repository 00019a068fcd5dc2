"""GP posterior over network outputs with a K x K precision built from Nystrom features.

The precision is ``G = sum_i phi(x_i)^T Lambda_i phi(x_i) + I_K / sigma0^2`` and
the predictive at ``x`` is ``N(g(x), phi(x) G^{-1} phi(x)^T)``.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.special import softmax

from . import fileio
from .autodiff import FlatParams
from .likelihoods import LikelihoodHead, lambda_hessian
from .linalg import cholesky_jittered, psd_sqrt, symmetrize
from .nystrom import NystromSketch, load_sketch, phi

log = logging.getLogger(__name__)

POSTERIOR_MAGIC = b"ELLAPOST"


@dataclass(frozen=True, eq=False)
class PredictiveGaussian:
    """Mean ``(C,)`` and covariance ``(C, C)``, or stacked with a leading batch axis."""

    mean: np.ndarray
    covariance: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diagonal(self.covariance, axis1=-2, axis2=-1), 0, None))


@dataclass(frozen=True)
class EarlyStopping:
    """Validation data scored every ``every`` accumulated training items."""

    X_val: np.ndarray
    Y_val: np.ndarray
    every: int
    mc_samples: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.every < 1:
            raise ValueError("eval-every must be positive")


@dataclass(eq=False)
class EllaPosterior:
    sketch: NystromSketch
    G_chol: np.ndarray
    sigma0_sq: float
    head: LikelihoodHead
    n_seen: int
    fit_log: list = field(default_factory=list)
    selected: int | None = None

    @property
    def K(self) -> int:
        return self.G_chol.shape[0]

    @property
    def G(self) -> np.ndarray:
        return self.G_chol @ self.G_chol.T


def _features(post: EllaPosterior, params: FlatParams, x):
    g, F = phi(params, post.sketch, x)
    single = F.ndim == 2
    return (g[None], F[None], True) if single else (g, F, False)


def _whiten(L: np.ndarray, F: np.ndarray) -> np.ndarray:
    """``L^{-1} F^T`` for every item of ``F`` ``(B, C, K)``, returned as ``(B, C, K)``."""
    b, c, k = F.shape
    A = scipy.linalg.solve_triangular(L, F.reshape(b * c, k).T, lower=True)
    return A.T.reshape(b, c, k)


def _cross_cov(L: np.ndarray, F1: np.ndarray, F2: np.ndarray) -> np.ndarray:
    A1 = _whiten(L, F1)
    A2 = A1 if F2 is F1 else _whiten(L, F2)
    return np.matmul(A1, np.swapaxes(A2, -1, -2))


def _chol(G: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(symmetrize(G))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"posterior precision is not positive definite: {exc}") from exc


def predictive_from_features(L: np.ndarray, g: np.ndarray, F: np.ndarray) -> PredictiveGaussian:
    return PredictiveGaussian(g, _cross_cov(L, F, F))


def gaussian_nll(mean, cov, y, noise_var: float) -> np.ndarray:
    """Per-item ``-log N(y; mean, cov + noise_var I)`` including the normalizer."""
    mean = np.atleast_2d(mean)
    cov = np.asarray(cov).reshape(mean.shape[0], mean.shape[1], mean.shape[1])
    y = np.asarray(y, dtype=float).reshape(mean.shape)
    S = cov + noise_var * np.eye(mean.shape[1])
    L = np.linalg.cholesky(S)
    r = np.linalg.solve(L, (y - mean)[..., None])[..., 0]
    logdet = 2 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1)
    return 0.5 * (np.sum(r * r, -1) + logdet + mean.shape[1] * np.log(2 * np.pi))


def _sampling_factors(cov: np.ndarray) -> np.ndarray:
    C = cov.shape[-1]
    out = np.zeros_like(cov)
    for b in range(cov.shape[0]):
        if not np.any(cov[b]):
            continue
        tr = abs(float(np.trace(cov[b])))
        out[b], _ = cholesky_jittered(symmetrize(cov[b]), 1e-10 * tr / C)
    return out


def mc_softmax(mean, cov, S: int = 512, seed: int = 0, chunk: int = 256) -> np.ndarray:
    """Monte Carlo estimate of ``E[softmax(f)]`` for ``f ~ N(mean, cov)`` per item."""
    if S < 1:
        raise ValueError("need at least one Monte Carlo sample")
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    single = mean.ndim == 1
    if single:
        mean, cov = mean[None], cov[None]
    rng = np.random.default_rng(seed)
    out = np.empty_like(mean)
    for s in range(0, mean.shape[0], chunk):
        m, c = mean[s:s + chunk], cov[s:s + chunk]
        z = rng.standard_normal((m.shape[0], S, m.shape[1]))
        Lf = _sampling_factors(c)
        f = m[:, None, :] + np.matmul(z, np.swapaxes(Lf, -1, -2))
        out[s:s + chunk] = softmax(f, axis=-1).mean(axis=1)
        zero = ~np.any(c.reshape(c.shape[0], -1), axis=1)
        out[s:s + chunk][zero] = softmax(m[zero], axis=-1)
    return out[0] if single else out


def _validation_nll(L, g_val, F_val, y_val, head: LikelihoodHead, es: EarlyStopping) -> float:
    pred = predictive_from_features(L, g_val, F_val)
    if head.kind == "gaussian":
        return float(np.mean(gaussian_nll(pred.mean, pred.covariance, y_val, head.noise_var)))
    p = mc_softmax(pred.mean, pred.covariance, es.mc_samples, es.seed)
    return float(-np.mean(np.log(p[np.arange(len(y_val)), np.asarray(y_val, dtype=int)])))


def fit(sketch: NystromSketch, params: FlatParams, X, Y, head: LikelihoodHead,
        sigma0_sq: float, early_stop: EarlyStopping | None = None,
        batch_size: int = 256, workers: int | None = None) -> EllaPosterior:
    """Accumulate ``G`` over the training set in order and factor it.

    With ``early_stop`` the validation NLL is recorded after 0, ``every``,
    ``2*every``, ... items and after the last one; the returned posterior is
    the checkpoint with the smallest recorded NLL (first one on ties).
    """
    if not sigma0_sq > 0:
        raise ValueError("prior variance must be positive")
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n == 0 and early_stop is None:
        raise ValueError("cannot fit on an empty dataset")
    K = sketch.K
    G = np.eye(K) / sigma0_sq
    if n:
        g, F = phi(params, sketch, X, workers=workers)
        lam = lambda_hessian(g, Y, head)
    if early_stop is None:
        for s in range(0, n, batch_size):
            Fb = F[s:s + batch_size]
            G += np.einsum("bck,bcd,bdl->kl", Fb, lam[s:s + batch_size], Fb, optimize=True)
        return EllaPosterior(sketch, _chol(G), sigma0_sq, head, n)

    g_val, F_val = phi(params, sketch, early_stop.X_val, workers=workers)
    stops = list(range(0, n, early_stop.every)) + [n]
    checkpoints = []
    pos = 0
    for stop in stops:
        while pos < stop:
            end = min(stop, pos + batch_size)
            Fb = F[pos:end]
            G += np.einsum("bck,bcd,bdl->kl", Fb, lam[pos:end], Fb, optimize=True)
            pos = end
        L = _chol(G)
        val = _validation_nll(L, g_val, F_val, early_stop.Y_val, head, early_stop)
        checkpoints.append((stop, val, L))
        log.info("early-stop checkpoint: %d items, validation NLL %.6f", stop, val)
    fit_log = [(c[0], c[1]) for c in checkpoints]
    best = int(np.argmin([c[1] for c in checkpoints]))
    return EllaPosterior(sketch, checkpoints[best][2], sigma0_sq, head,
                         checkpoints[best][0], fit_log, best)


def predict_f(post: EllaPosterior, params: FlatParams, x) -> PredictiveGaussian:
    """``N(g(x), phi(x) G^{-1} phi(x)^T)`` via triangular solves against ``chol(G)``."""
    g, F, single = _features(post, params, x)
    pred = predictive_from_features(post.G_chol, g, F)
    if single:
        return PredictiveGaussian(pred.mean[0], pred.covariance[0])
    return pred


def kappa_ella(post: EllaPosterior, params: FlatParams, x, x_prime) -> np.ndarray:
    """Posterior cross-covariance ``phi(x) G^{-1} phi(x')^T`` for single inputs."""
    _, F1, _ = _features(post, params, x)
    _, F2, _ = _features(post, params, x_prime)
    if np.array_equal(F1, F2):
        F2 = F1
    return _cross_cov(post.G_chol, F1, F2)[0]


def predictive_probs(post: EllaPosterior, params: FlatParams, x, S: int = 512,
                     seed: int = 0) -> np.ndarray:
    """Posterior predictive class probabilities by ``S`` Monte Carlo function samples."""
    if post.head.kind != "categorical":
        raise ValueError("predictive_probs needs a categorical head")
    pred = predict_f(post, params, x)
    return mc_softmax(pred.mean, pred.covariance, S, seed)


def woodbury_inner(lam_X: np.ndarray, gram: np.ndarray, sigma0_sq: float) -> np.ndarray:
    """``[Lambda^{-1}/sigma0^2 + gram]^{-1}``, written so a singular ``Lambda`` is fine.

    Uses ``S (I/sigma0^2 + S gram S)^{-1} S`` with ``S = Lambda^{1/2}``.
    """
    S = psd_sqrt(lam_X)
    inner = np.eye(gram.shape[0]) / sigma0_sq + S @ gram @ S
    c = scipy.linalg.cho_factor(symmetrize(inner), lower=True)
    return S @ scipy.linalg.cho_solve(c, S)


def kappa_ella_woodbury(phi_x, phi_xp, Phi_X, lam_X, sigma0_sq: float) -> np.ndarray:
    """The subtractive form ``sigma0^2 (phi phi'^T - phi Phi^T [..]^{-1} Phi phi'^T)``."""
    Q = woodbury_inner(lam_X, Phi_X @ Phi_X.T, sigma0_sq)
    return sigma0_sq * (phi_x @ phi_xp.T - phi_x @ Phi_X.T @ Q @ Phi_X @ phi_xp.T)


# --------------------------------------------------------------------------
# persistence


def save_posterior(path, post: EllaPosterior, sketch_path, meta: dict | None = None) -> None:
    sketch_path = Path(sketch_path)
    rel = os.path.relpath(sketch_path.resolve(), Path(path).resolve().parent)
    header = {"sigma0_sq": post.sigma0_sq, "K": post.K, "head": post.head.to_dict(),
              "n_seen": post.n_seen, "fit_log": [list(e) for e in post.fit_log],
              "selected": post.selected, "sketch_path": rel,
              "sketch_sha256": fileio.file_sha256(sketch_path), "meta": meta or {}}
    fileio.write_container(path, POSTERIOR_MAGIC, header, {"G_chol": post.G_chol})


def load_posterior(path, sketch_path=None) -> tuple[EllaPosterior, dict]:
    header, arrays = fileio.read_container(path, POSTERIOR_MAGIC)
    if sketch_path is None:
        sketch_path = Path(path).resolve().parent / header["sketch_path"]
    if fileio.file_sha256(sketch_path) != header["sketch_sha256"]:
        raise ValueError(f"{sketch_path}: sketch file does not match the posterior's hash")
    sketch = load_sketch(sketch_path)
    if sketch.K != header["K"]:
        raise ValueError("posterior and sketch disagree on K")
    post = EllaPosterior(sketch, arrays["G_chol"], header["sigma0_sq"],
                         LikelihoodHead.from_dict(header["head"]), header["n_seen"],
                         [tuple(e) for e in header["fit_log"]], header["selected"])
    return post, header.get("meta", {})
