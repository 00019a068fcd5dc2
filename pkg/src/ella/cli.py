"""Command-line interface.

Every subcommand is a thin wrapper over library calls. Logs go to stderr and
machine-readable output (JSON, JSON lines, CSV) to stdout or to named files.
Options may also come from a TOML file (``--config``), one table per
subcommand; explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from scipy.special import softmax

from . import data as dio
from .autodiff import forward, load_checkpoint, mlp, save_checkpoint, small_convnet
from .experiments import (RegressionDemoConfig, VerifyConfig, head_for, regression_demo, sweep,
                          verify_instances)
from .fileio import file_sha256
from .likelihoods import LikelihoodHead, TrainConfig, TrainingDiverged, nll, prior_variance, train_map
from .metrics import classification_report, curve_csv, error_vs_confidence
from .nystrom import build_sketch, landmark_jacobian, sample_landmarks, save_sketch
from .posterior import (EarlyStopping, fit, gaussian_nll, load_posterior, predict_f,
                        predictive_probs, save_posterior)

log = logging.getLogger("ella")

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class UsageError(Exception):
    pass


def _int_list(s: str) -> list[int]:
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")


# --------------------------------------------------------------------------
# dataset flags


def _add_data_args(p: argparse.ArgumentParser, default_part: str = "train") -> None:
    g = p.add_argument_group("dataset")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--demo-sine", action="store_true", help="y = sin(2x) + noise on [-2, 2]")
    src.add_argument("--demo-moons", action="store_true", help="two-moons classification")
    src.add_argument("--mnist5k", action="store_true", help="bundled 5000-image MNIST subset")
    src.add_argument("--idx", nargs=2, metavar=("IMAGES", "LABELS"), help="IDX image/label files")
    src.add_argument("--csv", metavar="PATH", help="CSV file with a header row")
    g.add_argument("--target", default="y", help="CSV target column (comma-separate several)")
    g.add_argument("--task", choices=("regression", "classification"), default="regression")
    g.add_argument("--n", type=int, help="generated size, or subsample size for files")
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--noise-var", type=float, default=0.2, help="gaussian observation noise")
    g.add_argument("--split", nargs=2, type=int, metavar=("TRAIN", "VAL"),
                   help="split into train/val/rest-as-test by --data-seed")
    g.add_argument("--part", choices=("train", "val", "test"), default=default_part)


def _load_dataset(args) -> dio.Dataset:
    if args.demo_sine:
        return dio.gen_sine_regression(args.n if args.n is not None else 16, args.data_seed,
                                       noise_var=args.noise_var)
    if args.demo_moons:
        return dio.gen_moons(args.n if args.n is not None else 500, args.data_seed)
    if args.mnist5k:
        ds = dio.load_mnist5k()
    elif args.idx:
        ds = dio.load_idx(*args.idx)
    elif args.csv:
        ds = dio.load_csv(args.csv, args.target.split(","), args.task)
    else:
        raise UsageError("no dataset given (use --demo-sine, --demo-moons, --mnist5k, --idx or --csv)")
    if args.n is not None:
        ds = dio.subsample(ds, args.n, args.data_seed)
    return ds


def _parts(args) -> dict[str, dio.Dataset]:
    ds = _load_dataset(args)
    if args.split is None:
        return {"train": ds, "val": None, "test": ds}
    n_tr, n_val = args.split
    if n_tr + n_val > len(ds):
        raise UsageError(f"--split {n_tr} {n_val} exceeds dataset size {len(ds)}")
    tr, va, te = dio.split(ds, [n_tr, n_val, len(ds) - n_tr - n_val], args.data_seed)
    return {"train": tr, "val": va, "test": te}


def _dataset(args) -> dio.Dataset:
    return _parts(args)[args.part]


def _head(args, ds: dio.Dataset, meta: dict | None = None) -> LikelihoodHead:
    if meta and "head" in meta:
        return LikelihoodHead.from_dict(meta["head"])
    return head_for(ds, args.noise_var)


# --------------------------------------------------------------------------
# commands


def cmd_train(args, out) -> int:
    ds = _dataset(args)
    head = _head(args, ds)
    if args.arch == "convnet" or (args.arch is None and ds.inputs.ndim == 4):
        arch = small_convnet(ds.inputs.shape[1:], tuple(args.channels), ds.C)
    else:
        arch = mlp(int(np.prod(ds.inputs.shape[1:])), args.hidden, ds.C, args.activation)
    cfg = TrainConfig(args.optimizer, args.lr, args.momentum, args.weight_decay, args.iters,
                      args.batch_size, args.seed)
    X = ds.inputs.reshape(len(ds), *arch.input_shape)
    params = train_map(arch, X, ds.targets, head, cfg)
    train_nll = float(np.mean(nll(forward(params, X), ds.targets, head)))
    meta = {"head": head.to_dict(), "weight_decay": args.weight_decay, "N": len(ds),
            "train": asdict(cfg), "data": ds.provenance}
    save_checkpoint(args.out, params, meta)
    log.info("trained P=%d parameters; final train NLL %.6f", params.P, train_nll)
    print(json.dumps({"train_nll": train_nll, "P": params.P, "checkpoint": str(args.out),
                      "sha256": file_sha256(args.out)}), file=out)
    return 0


def _sigma0_sq(args, meta: dict, N: int) -> tuple[float, str]:
    if args.sigma0 is not None:
        return args.sigma0 ** 2, "--sigma0"
    if args.sigma0_sq is not None:
        return args.sigma0_sq, "--sigma0-sq"
    gamma = args.from_weight_decay if args.from_weight_decay is not None else meta.get("weight_decay")
    if gamma is None:
        raise UsageError("no prior variance: pass --sigma0, --sigma0-sq or --from-weight-decay")
    return prior_variance(N, gamma), f"1/(N*gamma) with gamma={gamma}, N={N}"


def cmd_fit(args, out) -> int:
    if args.K > args.M:
        raise UsageError(f"--K {args.K} cannot exceed --M {args.M}")
    params, meta = load_checkpoint(args.checkpoint)
    parts = _parts(args)
    train = parts["train"]
    head = _head(args, train, meta)
    s2, how = _sigma0_sq(args, meta, len(train))
    log.info("prior variance %.6g (%s)", s2, how)
    es = None
    if args.early_stop is not None:
        if parts["val"] is None or len(parts["val"]) == 0:
            raise UsageError("--early-stop needs a validation part (use --split TRAIN VAL)")
        es = EarlyStopping(parts["val"].inputs, parts["val"].targets, args.early_stop,
                           args.mc_samples, args.seed)
    lm = sample_landmarks(len(train), head.C, args.M, args.seed)
    sketch = build_sketch(landmark_jacobian(params, train.inputs, lm), args.K, seed=args.seed,
                          arch_hash=params.arch.hash())
    log.info("sketch eigenvalues: %s", " ".join(f"{v:.4g}" for v in sketch.eigenvalues))
    post = fit(sketch, params, train.inputs, train.targets, head, s2, es)
    for items, v in post.fit_log:
        log.info("validation NLL after %d items: %.6f", items, v)
    save_sketch(args.sketch_out, sketch)
    save_posterior(args.out, post, args.sketch_out,
                   {"checkpoint_sha256": file_sha256(args.checkpoint), "M": args.M,
                    "seed": args.seed, "prior": how})
    print(json.dumps({"posterior": str(args.out), "sketch": str(args.sketch_out), "K": sketch.K,
                      "M": args.M, "sigma0_sq": s2, "n_seen": post.n_seen,
                      "fit_log": post.fit_log, "selected": post.selected}), file=out)
    return 0


def evaluate(post, params, ds: dio.Dataset, mc_samples: int = 512, seed: int = 0):
    """Metrics of the sketch posterior (and of the MAP network) on ``ds``.

    Returns ``(report dict, MetricsReport or None, predictive probs or None)``;
    the last two only for classification.
    """
    if post.head.kind == "categorical":
        probs = predictive_probs(post, params, ds.inputs, mc_samples, seed)
        rep = classification_report(probs, ds.targets)
        report = rep.to_dict()
        map_probs = softmax(forward(params, ds.inputs), axis=-1)
        report["map"] = classification_report(map_probs, ds.targets).to_dict()
        report["map"].pop("bins")
        return report, rep, probs
    pred = predict_f(post, params, ds.inputs)
    y = np.asarray(ds.targets, dtype=float).reshape(pred.mean.shape)
    nv = post.head.noise_var
    zero = np.zeros_like(pred.covariance)
    report = {"nll": float(np.mean(gaussian_nll(pred.mean, pred.covariance, y, nv))),
              "rmse": float(np.sqrt(np.mean((pred.mean - y) ** 2))), "n": len(ds),
              "map": {"nll": float(np.mean(gaussian_nll(pred.mean, zero, y, nv)))}}
    return report, None, None


def cmd_eval(args, out) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    post, _ = load_posterior(args.posterior)
    ds = _dataset(args)
    report, rep, probs = evaluate(post, params, ds, args.mc_samples, args.seed)
    if probs is not None and args.curve_csv:
        Path(args.curve_csv).write_text(
            curve_csv(error_vs_confidence(probs, ds.targets, np.linspace(0.0, 1.0, 21))))
    if rep is not None and args.bins_csv:
        Path(args.bins_csv).write_text(rep.bins_csv())
    text = json.dumps(report)
    if args.metrics:
        Path(args.metrics).write_text(text + "\n")
    print(text, file=out)
    return 0


def _write_csv(rows: list[dict], fh) -> None:
    if not rows:
        return
    w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else v) for k, v in r.items()})


def cmd_sweep(args, out) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    parts = _parts(args)
    train, test = parts["train"], parts["test"]
    head = _head(args, train, meta)
    s2, _ = _sigma0_sq(args, meta, len(train))
    rows = sweep(params, train, test, head, s2, args.M_grid, args.K_grid, args.seeds,
                 args.mc_samples, args.oracle_points)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            _write_csv(rows, fh)
    else:
        _write_csv(rows, out)
    return 0


def cmd_verify(args, out) -> int:
    if args.instances < 0:
        raise UsageError("--instances must be nonnegative")
    if not 0 < args.delta <= 1:
        raise UsageError("--delta must lie in (0, 1]")
    cfg = VerifyConfig(args.instances, args.seed, args.delta)
    held = 0
    for rep in verify_instances(cfg):
        held += rep["holds_thm0"]
        print(json.dumps(rep), file=out)
    log.info("deterministic bound held on %d/%d instances", held, args.instances)
    return 0


def cmd_demo_regression(args, out) -> int:
    cfg = RegressionDemoConfig(N=args.n, iterations=args.iters, M=args.M, K=args.K,
                               weight_decay=args.weight_decay, seed=args.seed)
    res = regression_demo(cfg)
    summary = {k: v for k, v in res.items() if k != "rows"}
    if args.out:
        with open(args.out, "w", newline="") as fh:
            _write_csv(res["rows"], fh)
        print(json.dumps(summary), file=out)
    else:
        _write_csv(res["rows"], out)
        log.info("KL summary: %s", json.dumps(summary))
    return 0


# --------------------------------------------------------------------------
# parser


def _add_prior_args(p) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--sigma0", type=float, help="prior standard deviation")
    g.add_argument("--sigma0-sq", type=float, help="prior variance")
    g.add_argument("--from-weight-decay", type=float, metavar="GAMMA",
                   help="prior variance 1/(N*GAMMA); default GAMMA comes from the checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ella", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="TOML file with one table per subcommand")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a MAP network and write a checkpoint")
    _add_data_args(p)
    p.add_argument("--arch", choices=("mlp", "convnet"))
    p.add_argument("--hidden", type=_int_list, default=[50, 50, 50])
    p.add_argument("--activation", choices=("tanh", "relu"), default="tanh")
    p.add_argument("--channels", type=_int_list, default=[8, 16])
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="model.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit", help="build the sketch and fit the posterior")
    p.add_argument("--checkpoint", required=True)
    _add_data_args(p)
    p.add_argument("--M", type=int, default=2000)
    p.add_argument("--K", type=int, default=20)
    _add_prior_args(p)
    p.add_argument("--early-stop", type=int, metavar="EVERY",
                   help="score the validation part every EVERY items, keep the best")
    p.add_argument("--mc-samples", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sketch-out", default="sketch.bin")
    p.add_argument("--out", default="posterior.bin")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="evaluate a fitted posterior")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--posterior", required=True)
    _add_data_args(p, default_part="test")
    p.add_argument("--mc-samples", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics", help="also write the JSON report here")
    p.add_argument("--bins-csv", help="per-bin calibration table")
    p.add_argument("--curve-csv", help="error-vs-confidence table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="errors and test NLL over an (M, K, seed) grid")
    p.add_argument("--checkpoint", required=True)
    _add_data_args(p)
    p.add_argument("--M-grid", type=_int_list, required=True)
    p.add_argument("--K-grid", type=_int_list, required=True)
    p.add_argument("--seeds", type=_int_list, default=[0])
    _add_prior_args(p)
    p.add_argument("--mc-samples", type=int, default=512)
    p.add_argument("--oracle-points", type=int, default=200,
                   help="test inputs used for the covariance error")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="check the approximation bounds on random instances")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta", type=float, default=0.1)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("demo-regression", help="1-D regression comparison against exact LLA")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--M", type=int, default=16)
    p.add_argument("--K", type=int, default=5)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default stdout; the KL summary then goes to the log)")
    p.set_defaults(func=cmd_demo_regression)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    with open(args.config, "rb") as fh:
        table = tomllib.load(fh).get(args.command, {})
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = set(k.replace("-", "_") for k in table) - known
    if unknown:
        parser.error(f"unknown keys in [{args.command}] of {args.config}: {sorted(unknown)}")
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in table.items()})
    return parser.parse_args(argv)


def main(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    parser = build_parser()
    args = _apply_config(parser, argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, out)
    except UsageError as exc:
        parser.error(str(exc))
    except (ValueError, OSError, np.linalg.LinAlgError, TrainingDiverged) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
