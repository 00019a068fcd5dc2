"""Test-set metrics: NLL, accuracy, expected calibration error, error vs confidence."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .likelihoods import LikelihoodHead
from .posterior import PredictiveGaussian, gaussian_nll

DEFAULT_BINS = 15


def _check_probs(probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("need a nonempty (n, C) array of probabilities")
    if np.any(np.abs(probs.sum(1) - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1")
    return probs


def _bin_index(conf: np.ndarray, bins: int) -> np.ndarray:
    # bin b covers (b/bins, (b+1)/bins]; confidence 0 falls into bin 0
    edges = np.linspace(0.0, 1.0, bins + 1)
    return np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)


def calibration_bins(probs, labels, bins: int = DEFAULT_BINS):
    """Per-bin (mean confidence, accuracy, count) over equal-width confidence bins."""
    probs = _check_probs(probs)
    labels = np.asarray(labels, dtype=int)
    conf = probs.max(1)
    correct = (probs.argmax(1) == labels).astype(float)
    b = _bin_index(conf, bins)
    counts = np.bincount(b, minlength=bins)
    conf_sum = np.bincount(b, weights=conf, minlength=bins)
    acc_sum = np.bincount(b, weights=correct, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        return conf_sum / counts, acc_sum / counts, counts


def ece(probs, labels, bins: int = DEFAULT_BINS) -> float:
    """``sum_b n_b/n |acc_b - conf_b|`` with confidence = max probability.

    Ties in the argmax go to the smaller class index.
    """
    conf, acc, counts = calibration_bins(probs, labels, bins)
    n = counts.sum()
    nz = counts > 0
    return float(np.sum(counts[nz] / n * np.abs(acc[nz] - conf[nz])))


def accuracy(probs, labels) -> float:
    probs = _check_probs(probs)
    return float(np.mean(probs.argmax(1) == np.asarray(labels, dtype=int)))


def nll_categorical(probs, labels) -> float:
    probs = _check_probs(probs)
    labels = np.asarray(labels, dtype=int)
    with np.errstate(divide="ignore"):
        return float(-np.mean(np.log(probs[np.arange(len(labels)), labels])))


def nll_dataset(predict, X, Y, head: LikelihoodHead) -> float:
    """Mean ``-log p(y|x)`` under a predictive.

    ``predict(X)`` returns class probabilities for a categorical head, or a
    :class:`PredictiveGaussian` over latent outputs for a Gaussian head, in which
    case the observation noise is added before scoring.
    """
    out = predict(X)
    if head.kind == "categorical":
        return nll_categorical(out, Y)
    if not isinstance(out, PredictiveGaussian):
        raise TypeError("regression predictive must be a PredictiveGaussian")
    return float(np.mean(gaussian_nll(out.mean, out.covariance, Y, head.noise_var)))


def error_vs_confidence(probs, labels, thresholds) -> list[dict]:
    """Error rate over items with confidence <= tau, for each tau.

    Thresholds that select no items get ``error = None`` rather than 0.
    """
    probs = _check_probs(probs)
    labels = np.asarray(labels, dtype=int)
    conf = probs.max(1)
    wrong = (probs.argmax(1) != labels).astype(float)
    rows = []
    for tau in thresholds:
        sel = conf <= tau
        n = int(sel.sum())
        rows.append({"threshold": float(tau), "count": n,
                     "error": float(wrong[sel].mean()) if n else None})
    return rows


@dataclass
class MetricsReport:
    nll: float
    accuracy: float
    ece: float
    n: int
    bins: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def bins_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["bin", "confidence", "accuracy", "count"])
        for i, b in enumerate(self.bins):
            w.writerow([i, b["confidence"], b["accuracy"], b["count"]])
        return buf.getvalue()


def classification_report(probs, labels, bins: int = DEFAULT_BINS) -> MetricsReport:
    conf, acc, counts = calibration_bins(probs, labels, bins)
    table = [{"confidence": None if c == 0 else float(cf),
              "accuracy": None if c == 0 else float(a), "count": int(c)}
             for cf, a, c in zip(conf, acc, counts)]
    return MetricsReport(nll_categorical(probs, labels), accuracy(probs, labels),
                         ece(probs, labels, bins), int(len(labels)), table)


def curve_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["threshold", "count", "error"])
    for r in rows:
        w.writerow([r["threshold"], r["count"], "" if r["error"] is None else r["error"]])
    return buf.getvalue()
