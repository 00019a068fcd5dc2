"""End-to-end studies built from the library: regression demo, M/K sweeps, MNIST.

Each study has a dataclass config and returns plain dicts/rows so the CLI and
the scripts can serialize them directly.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import softmax

from .autodiff import FlatParams, forward, mlp, small_convnet
from .data import Dataset, gen_moons, gen_sine_regression, load_mnist5k, split
from .likelihoods import LikelihoodHead, TrainConfig, prior_variance, train_map
from .metrics import classification_report, nll_categorical
from .nystrom import build_sketch, landmark_jacobian, nystrom_error, sample_landmarks
from .oracle import (LlaOracle, check_theorem_bounds, dense_jacobian, kl_gaussian,
                     mean_relative_cov_error, random_theorem_instance)
from .posterior import (EarlyStopping, PredictiveGaussian, fit, gaussian_nll, predict_f,
                        predictive_probs)

log = logging.getLogger(__name__)


def head_for(ds: Dataset, noise_var: float = 0.2) -> LikelihoodHead:
    if ds.task == "classification":
        return LikelihoodHead.categorical(ds.C)
    return LikelihoodHead.gaussian(noise_var, ds.C)


def build_posterior(params: FlatParams, train: Dataset, head: LikelihoodHead, sigma0_sq: float,
                    M: int, K: int, seed: int = 0, early_stop: EarlyStopping | None = None,
                    keep_jacobian: bool = False):
    """Sample landmarks, build the sketch and fit ``G``; returns ``(sketch, posterior)``."""
    lm = sample_landmarks(len(train), head.C, M, seed)
    J_lm = landmark_jacobian(params, train.inputs, lm)
    sketch = build_sketch(J_lm, K, seed=seed, arch_hash=params.arch.hash(),
                          keep_jacobian=keep_jacobian)
    post = fit(sketch, params, train.inputs, train.targets, head, sigma0_sq, early_stop)
    return sketch, post


def test_nll(post, params: FlatParams, ds: Dataset, mc_samples: int = 512, seed: int = 0) -> float:
    if post.head.kind == "categorical":
        return nll_categorical(predictive_probs(post, params, ds.inputs, mc_samples, seed),
                               ds.targets)
    pred = predict_f(post, params, ds.inputs)
    return float(np.mean(gaussian_nll(pred.mean, pred.covariance, ds.targets,
                                      post.head.noise_var)))


def mean_kl(p: PredictiveGaussian, q: PredictiveGaussian) -> float:
    """Average pointwise ``KL(p(x) || q(x))`` over a batch of predictives."""
    return float(np.mean([kl_gaussian(PredictiveGaussian(p.mean[i], p.covariance[i]),
                                      PredictiveGaussian(q.mean[i], q.covariance[i]))
                          for i in range(len(p.mean))]))


# --------------------------------------------------------------------------
# regression demo


@dataclass(frozen=True)
class RegressionDemoConfig:
    N: int = 16
    hidden: tuple = (50, 50, 50)
    iterations: int = 1000
    lr: float = 1e-2
    weight_decay: float = 0.05
    noise_var: float = 0.2
    M: int = 16
    K: int = 5
    grid: tuple = (-4.0, 4.0, 200)
    seed: int = 0


DEMO_METHODS = ("ELLA", "LLA-exact", "LLA-diag", "LLA-lastlayer")


def regression_demo(cfg: RegressionDemoConfig = RegressionDemoConfig()) -> dict:
    """Train the sine-regression MLP, then compare predictive variants on a grid.

    Returns ``{"rows": [...], "kl": {method: mean KL to exact LLA}, ...}``; rows
    carry ``x`` and per-method ``mean``/``std`` columns.
    """
    ds = gen_sine_regression(cfg.N, cfg.seed, noise_var=cfg.noise_var)
    head = LikelihoodHead.gaussian(cfg.noise_var)
    arch = mlp(1, list(cfg.hidden), 1, "tanh")
    params = train_map(arch, ds.inputs, ds.targets, head,
                       TrainConfig(lr=cfg.lr, weight_decay=cfg.weight_decay,
                                   iterations=cfg.iterations, seed=cfg.seed))
    s2 = prior_variance(cfg.N, cfg.weight_decay)
    sketch, post = build_posterior(params, ds, head, s2, cfg.M, cfg.K, cfg.seed)
    oracle = LlaOracle(params, ds.inputs, ds.targets, head, s2)
    lo, hi, n = cfg.grid
    grid = np.linspace(lo, hi, int(n))[:, None]
    preds = {"ELLA": predict_f(post, params, grid),
             "LLA-exact": oracle.predictive(grid, "exact"),
             "LLA-diag": oracle.predictive(grid, "diag"),
             "LLA-lastlayer": oracle.predictive(grid, "lastlayer")}
    rows = []
    for i, x in enumerate(grid[:, 0]):
        row = {"x": float(x)}
        for m in DEMO_METHODS:
            row[f"{m}_mean"] = float(preds[m].mean[i, 0])
            row[f"{m}_std"] = float(preds[m].std[i, 0])
        rows.append(row)
    kl = {m: mean_kl(preds[m], preds["LLA-exact"]) for m in DEMO_METHODS if m != "LLA-exact"}
    train_std = float(np.mean(predict_f(post, params, ds.inputs).std))
    train_rmse = float(np.sqrt(np.mean((forward(params, ds.inputs) - ds.targets) ** 2)))
    return {"rows": rows, "kl": kl, "sigma0_sq": s2, "K": sketch.K, "seed": cfg.seed,
            "train_rmse": train_rmse, "ella_train_std": train_std}


# --------------------------------------------------------------------------
# M / K sweep


def sweep(params: FlatParams, train: Dataset, test: Dataset, head: LikelihoodHead,
          sigma0_sq: float, M_grid, K_grid, seeds, mc_samples: int = 512,
          oracle_points: int | None = None) -> list[dict]:
    """One row per ``(M, K, seed)``: Nystrom error, covariance error and test NLL.

    The dense errors need an exact oracle; they are ``None`` when the training
    set is beyond the oracle's size limits. ``oracle_points`` caps how many test
    inputs enter the covariance error.
    """
    try:
        J_X = dense_jacobian(params, train.inputs).matrix
        oracle = LlaOracle(params, train.inputs, train.targets, head, sigma0_sq)
    except ValueError as exc:
        log.warning("skipping dense errors: %s", exc)
        J_X = oracle = None
    X_cmp = test.inputs if oracle_points is None else test.inputs[:oracle_points]
    exact_cov = oracle.kappa(X_cmp) if oracle is not None else None
    rows = []
    for M in M_grid:
        for K in K_grid:
            if K > M:
                log.warning("skipping K=%d > M=%d", K, M)
                continue
            for seed in seeds:
                sketch, post = build_posterior(params, train, head, sigma0_sq, M, K, seed,
                                               keep_jacobian=True)
                row = {"M": M, "K": K, "seed": seed, "K_effective": sketch.K,
                       "eps_nystrom": None, "eps_ella": None}
                if oracle is not None:
                    row["eps_nystrom"] = nystrom_error(J_X, sketch.jacobian, K)
                    row["eps_ella"] = mean_relative_cov_error(
                        predict_f(post, params, X_cmp).covariance, exact_cov)
                row["test_nll"] = test_nll(post, params, test, mc_samples, seed)
                rows.append(row)
                log.info("sweep %s", row)
    return rows


@dataclass(frozen=True)
class TrendConfig:
    """Moons classification with an MLP of about 3000 parameters."""

    N: int = 500
    n_val: int = 100
    hidden: tuple = (50, 50)
    activation: str = "relu"
    iterations: int = 500
    lr: float = 1e-2
    weight_decay: float = 1e-2
    data_seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    pairs: tuple = ((64, 64), (512, 64), (512, 8))


def trend_study(cfg: TrendConfig = TrendConfig()) -> list[dict]:
    """Errors for each ``(M, K)`` in ``cfg.pairs`` over landmark seeds on one trained net."""
    ds = gen_moons(cfg.N + cfg.n_val, cfg.data_seed)
    train, val = split(ds, [cfg.N, cfg.n_val], cfg.data_seed)
    head = LikelihoodHead.categorical(2)
    arch = mlp(2, list(cfg.hidden), 2, cfg.activation)
    params = train_map(arch, train.inputs, train.targets, head,
                       TrainConfig(lr=cfg.lr, weight_decay=cfg.weight_decay,
                                   iterations=cfg.iterations, seed=cfg.data_seed))
    s2 = prior_variance(cfg.N, cfg.weight_decay)
    J_X = dense_jacobian(params, train.inputs).matrix
    oracle = LlaOracle(params, train.inputs, train.targets, head, s2)
    exact_cov = oracle.kappa(val.inputs)
    rows = []
    for M, K in cfg.pairs:
        for seed in cfg.seeds:
            sketch, post = build_posterior(params, train, head, s2, M, K, seed,
                                           keep_jacobian=True)
            rows.append({"M": M, "K": K, "seed": seed, "P": params.P,
                         "eps_nystrom": nystrom_error(J_X, sketch.jacobian, K),
                         "eps_ella": mean_relative_cov_error(
                             predict_f(post, params, val.inputs).covariance, exact_cov)})
    return rows


def median_by(rows: list[dict], key: str, **where) -> float:
    vals = [r[key] for r in rows if all(r[k] == v for k, v in where.items())]
    return float(np.median(vals))


# --------------------------------------------------------------------------
# MNIST


@dataclass(frozen=True)
class MnistConfig:
    n_train: int = 2000
    n_val: int = 256
    channels: tuple = (8, 16)
    iterations: int = 1500
    batch_size: int = 128
    lr: float = 3e-3
    weight_decay: float = 5e-4
    M: int = 256
    K: int = 16
    eval_every: int = 250
    mc_samples: int = 512
    seed: int = 0


def mnist_study(cfg: MnistConfig = MnistConfig(), ds: Dataset | None = None) -> dict:
    """MAP vs the sketch posterior on the bundled MNIST subset.

    The subset is split into ``n_train`` / ``n_val`` / rest-as-test by ``cfg.seed``;
    validation drives early stopping of the posterior fit.
    """
    t0 = time.perf_counter()
    ds = ds if ds is not None else load_mnist5k()
    train, val, test = split(ds, [cfg.n_train, cfg.n_val, len(ds) - cfg.n_train - cfg.n_val],
                             cfg.seed)
    head = LikelihoodHead.categorical(ds.C)
    arch = small_convnet(ds.inputs.shape[1:], cfg.channels, ds.C)
    params = train_map(arch, train.inputs, train.targets, head,
                       TrainConfig(lr=cfg.lr, weight_decay=cfg.weight_decay,
                                   iterations=cfg.iterations, batch_size=cfg.batch_size,
                                   seed=cfg.seed))
    s2 = prior_variance(cfg.n_train, cfg.weight_decay)
    es = EarlyStopping(val.inputs, val.targets, cfg.eval_every, cfg.mc_samples, cfg.seed)
    sketch, post = build_posterior(params, train, head, s2, cfg.M, cfg.K, cfg.seed, es)
    map_probs = softmax(forward(params, test.inputs), axis=-1)
    ella_probs = predictive_probs(post, params, test.inputs, cfg.mc_samples, cfg.seed)
    return {"seed": cfg.seed, "P": params.P, "sigma0_sq": s2, "K": sketch.K,
            "selected_items": post.n_seen, "fit_log": post.fit_log,
            "map": classification_report(map_probs, test.targets).to_dict(),
            "ella": classification_report(ella_probs, test.targets).to_dict(),
            "seconds": time.perf_counter() - t0, "config": asdict(cfg)}


# --------------------------------------------------------------------------
# theorem checks


@dataclass(frozen=True)
class VerifyConfig:
    instances: int = 100
    seed: int = 0
    delta: float = 0.1
    max_P: int = 60
    max_N: int = 20
    max_C: int = 3


def verify_instances(cfg: VerifyConfig = VerifyConfig()):
    """Yield one bound report dict per random instance, reproducibly from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    for i in range(cfg.instances):
        inst = random_theorem_instance(rng, cfg.max_P, cfg.max_N, cfg.max_C)
        rep = check_theorem_bounds(inst, cfg.delta).to_dict()
        rep["instance"] = i
        yield rep
