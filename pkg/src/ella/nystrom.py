"""Nystrom sketch of the NTK and the JVP feature map built from it.

The scalar NTK over (input, output-index) pairs is sampled at ``M``
landmarks. The top-``K`` eigenpairs ``(lam_k, u_k)`` of the landmark gram
``J J^T`` give parameter-space directions ``v_k = J^T u_k / sqrt(lam_k)``,
and the feature map is ``phi(x)[:, k] = J(x) v_k`` so that
``phi(x) phi(x')^T`` approximates ``J(x) J(x')^T``.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import fileio
from .autodiff import FlatParams, jacobian, jvp_multi, vjp
from .linalg import cholesky_jittered, spectral_norm, symmetrize

log = logging.getLogger(__name__)

SKETCH_MAGIC = b"ELLASKCH"


def default_workers() -> int:
    return max(1, int(os.environ.get("ELLA_WORKERS", "1")))


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """``M`` (datum index, 0-based class index) pairs."""

    indices: np.ndarray
    classes: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=int).reshape(-1))
        object.__setattr__(self, "classes", np.asarray(self.classes, dtype=int).reshape(-1))
        if self.indices.shape != self.classes.shape:
            raise ValueError("indices and classes must have equal length")

    @property
    def M(self) -> int:
        return self.indices.shape[0]


def sample_landmarks(n_data, C: int, M: int, seed: int = 0) -> LandmarkSet:
    """``M`` i.i.d. draws (with replacement) from uniform data x uniform class."""
    n = n_data if isinstance(n_data, (int, np.integer)) else len(n_data)
    if n < 1:
        raise ValueError("cannot sample landmarks from an empty dataset")
    if M < 1:
        raise ValueError("M must be at least 1")
    rng = np.random.default_rng(seed)
    return LandmarkSet(rng.integers(0, n, size=M), rng.integers(0, C, size=M), seed)


def all_landmarks(n_data: int, C: int) -> LandmarkSet:
    """Every (datum, class) pair, datum-major: row ``i*C + c``."""
    return LandmarkSet(np.repeat(np.arange(n_data), C), np.tile(np.arange(C), n_data))


def distinct_landmarks(n_data: int, C: int, M: int, seed: int = 0) -> LandmarkSet:
    """``M`` pairs drawn without replacement (used where the gram must be invertible)."""
    if M > n_data * C:
        raise ValueError(f"only {n_data * C} distinct pairs available, asked for {M}")
    flat = np.random.default_rng(seed).choice(n_data * C, size=M, replace=False)
    return LandmarkSet(flat // C, flat % C, seed)


def landmark_jacobian(params: FlatParams, X, landmarks: LandmarkSet,
                      chunk: int = 256) -> np.ndarray:
    """``(M, P)`` matrix whose row ``m`` is the gradient of output ``i_m`` at ``x_m``."""
    X = np.asarray(X, dtype=float)
    C = params.arch.output_dim
    if landmarks.M and (landmarks.classes.max() >= C or landmarks.classes.min() < 0):
        raise IndexError("landmark class index out of range")
    out = np.empty((landmarks.M, params.P))
    for s in range(0, landmarks.M, chunk):
        idx = landmarks.indices[s:s + chunk]
        cls = landmarks.classes[s:s + chunk]
        ct = np.zeros((len(idx), C))
        ct[np.arange(len(idx)), cls] = 1.0
        out[s:s + chunk] = vjp(params, X[idx], ct)
    return out


@dataclass(frozen=True, eq=False)
class NystromSketch:
    """Top-``K`` spectrum of the landmark gram and the derived directions.

    ``directions`` is ``(K, P)``: row ``k`` is ``v_k``. ``eigenvectors`` is
    ``(M, K)``. ``jacobian`` (the ``(M, P)`` landmark Jacobian) is kept only
    when requested.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    directions: np.ndarray
    M: int
    requested_K: int
    seed: int | None = None
    arch_hash: str | None = None
    jacobian: np.ndarray | None = None

    @property
    def K(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def mu(self) -> np.ndarray:
        """Eigenvalue estimates of the NTK integral operator, ``lam_k / M``."""
        return self.eigenvalues / self.M


def _sign_normalize(U: np.ndarray) -> np.ndarray:
    U = U.copy()
    for k in range(U.shape[1]):
        nz = np.flatnonzero(np.abs(U[:, k]) > 1e-12)
        if nz.size and U[nz[0], k] < 0:
            U[:, k] = -U[:, k]
    return U


def build_sketch(J_landmarks, K: int, rank_cutoff: float = 1e-10, *, seed=None,
                 arch_hash=None, keep_jacobian: bool = False) -> NystromSketch:
    """Eigendecompose ``J J^T`` and keep the top ``K`` pairs above ``rank_cutoff * lam_1``.

    Fewer than ``K`` surviving eigenvalues truncate the sketch (logged and
    visible as ``K < requested_K``).
    """
    J = np.asarray(J_landmarks, dtype=float)
    M = J.shape[0]
    if not 1 <= K <= M:
        raise ValueError(f"K={K} must satisfy 1 <= K <= M={M}")
    gram = symmetrize(J @ J.T)
    w, U = np.linalg.eigh(gram)
    order = np.argsort(w)[::-1]
    w, U = w[order], U[:, order]
    if not w[0] > 0:
        raise np.linalg.LinAlgError("kernel numerically rank zero")
    keep = min(K, int(np.sum(w > rank_cutoff * w[0])))
    if keep < K:
        log.warning("only %d of %d requested eigenvalues exceed the rank cutoff; K truncated",
                    keep, K)
    lam = w[:keep]
    U = _sign_normalize(U[:, :keep])
    V = (J.T @ U / np.sqrt(lam)).T
    return NystromSketch(lam, U, np.ascontiguousarray(V), M, K, seed, arch_hash,
                         J if keep_jacobian else None)


def phi(params: FlatParams, sketch: NystromSketch, x, chunk: int = 512,
        workers: int | None = None):
    """Network output and features ``(C, K)`` per input, via forward-mode JVPs.

    All ``K`` directions ride along one forward pass as a stacked tangent.
    Returns ``(g, features)`` with a leading batch axis when ``x`` is a batch.
    """
    if sketch.arch_hash is not None and sketch.arch_hash != params.arch.hash():
        raise ValueError("sketch was built for a different architecture")
    x = np.asarray(x, dtype=float)
    if x.shape == params.arch.input_shape:
        return jvp_multi(params, x, sketch.directions)
    starts = list(range(0, x.shape[0], chunk))
    workers = workers or default_workers()

    def run(s):
        return jvp_multi(params, x[s:s + chunk], sketch.directions)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    if not parts:
        C = params.arch.output_dim
        return np.zeros((0, C)), np.zeros((0, C, sketch.K))
    return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))


def phi_from_eigenfunctions(params: FlatParams, sketch: NystromSketch, x,
                            J_landmarks=None) -> np.ndarray:
    """Features built by evaluating the Nystrom eigenfunctions explicitly.

    ``psi_k(x, i) = sqrt(M)/lam_k * J(x, i) J_landmarks^T u_k`` scaled by
    ``sqrt(mu_k)``; needs the dense landmark Jacobian. Used to cross-check
    :func:`phi`.
    """
    J_lm = sketch.jacobian if J_landmarks is None else np.asarray(J_landmarks)
    if J_lm is None:
        raise ValueError("landmark Jacobian required")
    Jx = jacobian(params, x)
    ntk_to_landmarks = Jx @ J_lm.T
    psi = np.sqrt(sketch.M) / sketch.eigenvalues * (ntk_to_landmarks @ sketch.eigenvectors)
    return psi * np.sqrt(sketch.mu)


def nystrom_error(J_train, J_landmarks, K: int | None = None, *, jitter: float = 1e-12,
                  rank_cutoff: float = 1e-10) -> float:
    """Relative spectral-norm error of the Nystrom reconstruction of ``J_X J_X^T``.

    With ``K=None`` the reconstruction uses every landmark,
    ``J_X J_m^T (J_m J_m^T)^{-1} J_m J_X^T``, the inverse regularized by
    ``jitter * trace / M``. With ``K`` given it is the rank-``K`` sketch
    ``Phi_X Phi_X^T`` that the feature map actually uses.
    """
    JX = np.asarray(J_train, dtype=float)
    Jm = np.asarray(J_landmarks, dtype=float)
    exact = symmetrize(JX @ JX.T)
    if K is None:
        gram = symmetrize(Jm @ Jm.T)
        scale = float(np.trace(gram)) / max(gram.shape[0], 1)
        if not scale > 0:
            raise np.linalg.LinAlgError("landmark gram is singular even after jitter")
        L, _ = cholesky_jittered(gram, jitter * scale)
        A = np.linalg.solve(L, Jm @ JX.T)
        approx = A.T @ A
    else:
        sk = build_sketch(Jm, K, rank_cutoff)
        F = JX @ sk.directions.T
        approx = F @ F.T
    denom = spectral_norm(exact)
    if denom == 0.0:
        return 0.0
    return spectral_norm(symmetrize(approx - exact)) / denom


# --------------------------------------------------------------------------
# persistence


def save_sketch(path, sketch: NystromSketch) -> None:
    header = {"M": sketch.M, "K": sketch.K, "requested_K": sketch.requested_K,
              "seed": sketch.seed, "arch_hash": sketch.arch_hash,
              "eigenvalues": [float(v) for v in sketch.eigenvalues]}
    arrays = {"directions": sketch.directions, "eigenvectors": sketch.eigenvectors}
    fileio.write_container(path, SKETCH_MAGIC, header, arrays)


def load_sketch(path) -> NystromSketch:
    header, arrays = fileio.read_container(path, SKETCH_MAGIC)
    lam = np.array(header["eigenvalues"], dtype=float)
    V = arrays["directions"]
    if V.shape[0] != lam.shape[0] or header["K"] != lam.shape[0]:
        raise ValueError(f"{path}: inconsistent K between header and payload")
    return NystromSketch(lam, arrays["eigenvectors"], V, header["M"], header["requested_K"],
                         header["seed"], header["arch_hash"])
