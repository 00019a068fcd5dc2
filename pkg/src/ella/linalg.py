"""Small dense linear-algebra helpers shared by the posterior and oracle code."""

from __future__ import annotations

import numpy as np
import scipy.linalg


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def spectral_norm(a: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000,
                  seed: int = 0) -> float:
    """Largest singular value of ``a``.

    Symmetric matrices go through a dense symmetric eigensolve. Everything else
    uses power iteration on ``a^T a`` until the Rayleigh quotient stops moving
    by more than ``tol`` (relative).
    """
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return 0.0
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    if a.shape[0] == a.shape[1] and np.array_equal(a, a.T):
        w = np.linalg.eigvalsh(a)
        return float(max(abs(w[0]), abs(w[-1])))
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = a.T @ (a @ v)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        if abs(nrm - est) <= tol * nrm:
            est = nrm
            break
        est = nrm
    return float(np.sqrt(est))


def cholesky_jittered(a: np.ndarray, jitter: float, max_tries: int = 3,
                      factor: float = 10.0) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``a + jitter*I``, escalating ``jitter`` on failure.

    Returns the factor together with the jitter that was finally used.
    Raises ``np.linalg.LinAlgError`` once ``max_tries`` escalations fail.
    """
    n = a.shape[-1]
    eye = np.eye(n)
    j = jitter
    for _ in range(max_tries + 1):
        try:
            return np.linalg.cholesky(a + j * eye), j
        except np.linalg.LinAlgError:
            j = j * factor if j > 0 else 1e-12 * max(1.0, float(np.trace(a)) / n)
    raise np.linalg.LinAlgError(
        f"matrix not positive definite even with jitter {j / factor:.3e}")


def psd_sqrt(a: np.ndarray) -> np.ndarray:
    """Symmetric square root of a (stack of) PSD matrices; negative noise is clipped."""
    w, u = np.linalg.eigh(symmetrize(a))
    w = np.clip(w, 0.0, None)
    return (u * np.sqrt(w)[..., None, :]) @ np.swapaxes(u, -1, -2)


def block_diag(blocks: np.ndarray) -> np.ndarray:
    """Stack of ``(N, C, C)`` blocks to one ``(NC, NC)`` block-diagonal matrix."""
    blocks = np.asarray(blocks, dtype=float)
    if blocks.shape[0] == 0:
        return np.zeros((0, 0))
    return scipy.linalg.block_diag(*blocks)


def spd_inverse(a: np.ndarray) -> np.ndarray:
    """Inverse of an SPD matrix through its Cholesky factor."""
    c, low = scipy.linalg.cho_factor(a, lower=True)
    return scipy.linalg.cho_solve((c, low), np.eye(a.shape[0]))
