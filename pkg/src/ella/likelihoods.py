"""Likelihood heads, their output-space Hessians, MAP training and the prior recipe."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from .autodiff import ArchDescriptor, FlatParams, calibrate_batchnorm, forward, init_params, vjp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LikelihoodHead:
    """Observation model on top of the network output.

    ``gaussian``: ``y ~ N(g, noise_var * I_C)``; targets are real ``(C,)`` vectors.
    ``categorical``: ``y ~ Cat(softmax(g))``; targets are 0-based class indices.
    """

    kind: str
    C: int
    noise_var: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "categorical"):
            raise ValueError(f"unknown likelihood {self.kind!r}")
        if self.C < 1:
            raise ValueError("output dimension must be positive")
        if self.kind == "gaussian" and not self.noise_var > 0:
            raise ValueError("gaussian noise variance must be positive")

    @classmethod
    def gaussian(cls, noise_var: float, C: int = 1) -> "LikelihoodHead":
        return cls("gaussian", C, noise_var)

    @classmethod
    def categorical(cls, C: int) -> "LikelihoodHead":
        return cls("categorical", C)

    @property
    def c_lambda(self) -> float:
        """Uniform upper bound on the spectral norm of the output Hessian."""
        return 1.0 / self.noise_var if self.kind == "gaussian" else 2.0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "C": self.C, "noise_var": self.noise_var}

    @classmethod
    def from_dict(cls, d: dict) -> "LikelihoodHead":
        return cls(d["kind"], int(d["C"]), float(d.get("noise_var", 1.0)))


def _labels(y, head: LikelihoodHead, batch: int) -> np.ndarray:
    y = np.asarray(y)
    if np.issubdtype(y.dtype, np.floating):
        if not np.all(y == np.round(y)):
            raise ValueError("categorical targets must be integer class indices")
        y = y.astype(int)
    y = y.reshape(batch)
    if y.size and (y.min() < 0 or y.max() >= head.C):
        raise ValueError(f"label out of range [0, {head.C - 1}]")
    return y


def nll(g, y, head: LikelihoodHead, include_constant: bool = False):
    """Negative log-likelihood of ``y`` given outputs ``g`` (one item or a batch).

    The Gaussian normalizer ``C/2 log(2 pi noise_var)`` is dropped unless
    ``include_constant``; training uses the constant-free loss, reported
    evaluation NLLs include it.
    """
    g = np.asarray(g, dtype=float)
    single = g.ndim == 1
    gb = g[None] if single else g
    if not np.all(np.isfinite(gb)):
        raise ValueError("network outputs are not finite")
    if head.kind == "gaussian":
        yb = np.asarray(y, dtype=float).reshape(gb.shape)
        out = 0.5 * np.sum((gb - yb) ** 2, axis=-1) / head.noise_var
        if include_constant:
            out = out + 0.5 * head.C * np.log(2 * np.pi * head.noise_var)
    else:
        yb = _labels(y, head, gb.shape[0])
        out = logsumexp(gb, axis=-1) - gb[np.arange(gb.shape[0]), yb]
    return float(out[0]) if single else out


def nll_grad(g, y, head: LikelihoodHead) -> np.ndarray:
    """Gradient of :func:`nll` with respect to a batch of outputs ``(B, C)``."""
    g = np.asarray(g, dtype=float)
    if head.kind == "gaussian":
        return (g - np.asarray(y, dtype=float).reshape(g.shape)) / head.noise_var
    p = softmax(g, axis=-1)
    p[np.arange(g.shape[0]), _labels(y, head, g.shape[0])] -= 1.0
    return p


def lambda_hessian(g, y, head: LikelihoodHead) -> np.ndarray:
    """Output-space Hessian of the NLL, ``(C, C)`` per item.

    Gaussian: ``I / noise_var``. Categorical: ``diag(p) - p p^T`` with
    ``p = softmax(g)``; it does not depend on ``y``.
    """
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("network outputs are not finite")
    single = g.ndim == 1
    gb = g[None] if single else g
    C = gb.shape[-1]
    if C != head.C:
        raise ValueError(f"output dimension {C} != head dimension {head.C}")
    if head.kind == "gaussian":
        lam = np.broadcast_to(np.eye(C) / head.noise_var, (gb.shape[0], C, C)).copy()
    else:
        p = np.exp(log_softmax(gb, axis=-1))
        lam = -p[:, :, None] * p[:, None, :]
        idx = np.arange(C)
        lam[:, idx, idx] += p
    return lam[0] if single else lam


# --------------------------------------------------------------------------
# prior and training


def prior_variance(N: int, gamma: float) -> float:
    """Prior variance implied by weight decay ``gamma`` on a mean loss over ``N`` items."""
    if N < 1:
        raise ValueError("N must be at least 1")
    if gamma <= 0:
        raise ValueError("weight decay must be positive (zero means an improper prior)")
    return 1.0 / (N * gamma)


@dataclass(frozen=True)
class PriorConfig:
    sigma0_sq: float
    derivation: str = "explicit"
    N: int | None = None
    gamma: float | None = None

    def __post_init__(self):
        if not self.sigma0_sq > 0:
            raise ValueError("prior variance must be positive")
        if self.derivation == "from_weight_decay":
            if self.sigma0_sq != 1.0 / (self.N * self.gamma):
                raise ValueError("sigma0_sq inconsistent with N and gamma")
        elif self.derivation != "explicit":
            raise ValueError(f"unknown prior derivation {self.derivation!r}")

    @classmethod
    def from_weight_decay(cls, N: int, gamma: float) -> "PriorConfig":
        return cls(prior_variance(N, gamma), "from_weight_decay", N, gamma)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-3
    iterations: int = 1000
    batch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning rate, weight decay and momentum must be nonnegative")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch size must be positive")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")
        self.iteration = iteration


def objective(params: FlatParams, X, Y, head: LikelihoodHead, weight_decay: float) -> float:
    """Mean NLL plus ``weight_decay/2 * ||theta||^2``."""
    g = forward(params, X)
    return float(np.mean(nll(g, Y, head)) + 0.5 * weight_decay * params.values @ params.values)


def train_map(arch: ArchDescriptor, X, Y, head: LikelihoodHead, cfg: TrainConfig,
              init: FlatParams | None = None, calibrate_bn: bool = True) -> FlatParams:
    """Minimize mean NLL + ``(gamma/2)||theta||^2`` (decay on every parameter).

    Minibatches are drawn without replacement per epoch from ``cfg.seed``.
    Networks with batchnorm get their frozen statistics set from the
    training inputs at initialization.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y)
    n = X.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    params = init if init is not None else init_params(arch, cfg.seed)
    if calibrate_bn and init is None:
        params = calibrate_batchnorm(params, X)
    theta = params.values.copy()
    rng = np.random.default_rng(cfg.seed + 1)
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    perm = rng.permutation(n)
    pos = 0
    for it in range(1, cfg.iterations + 1):
        if pos + bs > n:
            perm = rng.permutation(n)
            pos = 0
        idx = perm[pos:pos + bs]
        pos += bs
        cur = params.with_values(theta) if np.all(np.isfinite(theta)) else None
        if cur is None:
            raise TrainingDiverged(it, float("nan"))
        g = forward(cur, X[idx])
        loss = float(np.mean(nll(g, Y[idx], head)) + 0.5 * cfg.weight_decay * theta @ theta)
        if not np.isfinite(loss):
            raise TrainingDiverged(it, loss)
        grad = vjp(cur, X[idx], nll_grad(g, Y[idx], head)[None] / bs, per_example=False)[0]
        grad += cfg.weight_decay * theta
        if cfg.optimizer == "adam":
            m1 = b1 * m1 + (1 - b1) * grad
            m2 = b2 * m2 + (1 - b2) * grad * grad
            theta = theta - cfg.lr * (m1 / (1 - b1 ** it)) / (np.sqrt(m2 / (1 - b2 ** it)) + eps)
        else:
            m1 = cfg.momentum * m1 + grad
            theta = theta - cfg.lr * m1
        if it % max(1, cfg.iterations // 10) == 0:
            log.debug("iter %d loss %.5f", it, loss)
    if not np.all(np.isfinite(theta)):
        raise TrainingDiverged(cfg.iterations, float("nan"))
    return params.with_values(theta)
