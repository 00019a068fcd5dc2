"""Datasets: synthetic generators, IDX and CSV loaders, subsampling and splits."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    """Inputs with targets.

    ``task`` is ``"classification"`` (targets: 0-based int labels, ``C`` classes)
    or ``"regression"`` (targets: float array ``(N, C)``).
    """

    inputs: np.ndarray
    targets: np.ndarray
    C: int
    task: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "classification" and len(self.targets):
            t = np.asarray(self.targets)
            if t.min() < 0 or t.max() >= self.C:
                raise ValueError(f"labels must lie in [0, {self.C - 1}]")

    def __len__(self):
        return len(self.inputs)

    def take(self, idx, note: str | None = None) -> "Dataset":
        prov = dict(self.provenance)
        if note:
            prov["history"] = prov.get("history", []) + [note]
        return Dataset(self.inputs[idx], self.targets[idx], self.C, self.task, prov)


def gen_sine_regression(N: int, seed: int = 0, interval=(-2.0, 2.0),
                        noise_var: float = 0.2) -> Dataset:
    """``y = sin(2x) + eps`` with ``eps ~ N(0, noise_var)`` and ``x ~ U(interval)``."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(interval[0], interval[1], size=N)
    y = np.sin(2 * x) + np.sqrt(noise_var) * rng.standard_normal(N)
    return Dataset(x[:, None], y[:, None], 1, "regression",
                   {"source": "sine", "seed": seed, "interval": list(interval),
                    "noise_var": noise_var})


def gen_moons(N: int, seed: int = 0, noise: float = 0.2) -> Dataset:
    """Two interleaved half circles with isotropic Gaussian jitter, labels 0/1."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=N)
    t = rng.uniform(0, np.pi, size=N)
    x = np.where(y[:, None] == 0,
                 np.stack([np.cos(t), np.sin(t)], 1),
                 np.stack([1 - np.cos(t), 0.5 - np.sin(t)], 1))
    x = x + noise * rng.standard_normal((N, 2))
    return Dataset(x, y, 2, "classification", {"source": "moons", "seed": seed, "noise": noise})


def gaussian_noise_corrupt(ds: Dataset, std: float, seed: int = 0,
                           clip=(0.0, 1.0)) -> Dataset:
    rng = np.random.default_rng(seed)
    x = ds.inputs + std * rng.standard_normal(ds.inputs.shape)
    if clip is not None:
        x = np.clip(x, *clip)
    prov = dict(ds.provenance, corruption={"gaussian_noise": std, "seed": seed})
    return Dataset(x, ds.targets, ds.C, ds.task, prov)


# --------------------------------------------------------------------------
# IDX


def _open_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, what: str):
    if len(raw) < 8:
        raise ValueError(f"{what}: file too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise ValueError(f"{what}: IDX magic {got:#010x}, expected {magic:#010x}")
    ndim = got & 0xFF
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    count = int(np.prod(dims))
    if len(body) != count:
        raise ValueError(f"{what}: expected {count} bytes of data, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, C: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _parse_idx(_open_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = _parse_idx(_open_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.astype(float)[:, None] / 255.0
    return Dataset(x, labels.astype(int), C, "classification",
                   {"source": str(images_path), "pixel_scale": 1 / 255.0, "pixel_shift": 0.0})


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(N, H, W)`` and labels ``(N,)``; ``.gz`` suffix compresses."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)

    def blob(magic, arr):
        return struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()

    for path, data in ((images_path, blob(IDX_IMAGES_MAGIC, images)),
                       (labels_path, blob(IDX_LABELS_MAGIC, labels))):
        path = Path(path)
        path.write_bytes(gzip.compress(data, mtime=0) if path.suffix == ".gz" else data)


def load_mnist5k() -> Dataset:
    """The bundled 5000-image MNIST subset (500 per digit)."""
    root = resources.files("ella") / "_data" / "mnist5k"
    with resources.as_file(root / "images-idx3-ubyte.gz") as im, \
            resources.as_file(root / "labels-idx1-ubyte.gz") as lb:
        ds = load_idx(im, lb)
    ds.provenance["source"] = "mnist5k"
    return ds


# --------------------------------------------------------------------------
# CSV


def load_csv(path, target_columns, task: str = "regression", C: int | None = None) -> Dataset:
    """CSV with a header row; ``target_columns`` name the target field(s)."""
    if isinstance(target_columns, str):
        target_columns = [target_columns]
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    missing = [c for c in target_columns if c not in header]
    if missing:
        raise ValueError(f"{path}: missing target columns {missing}")
    for n, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise ValueError(f"{path}:{n}: expected {len(header)} fields, got {len(r)}")
    tidx = [header.index(c) for c in target_columns]
    fidx = [i for i in range(len(header)) if i not in tidx]
    arr = np.array(body, dtype=float).reshape(len(body), len(header))
    x = arr[:, fidx]
    if task == "classification":
        y = arr[:, tidx[0]].astype(int)
        C = C if C is not None else int(y.max()) + 1
    else:
        y = arr[:, tidx]
        C = len(tidx)
    return Dataset(x, y, C, task, {"source": str(path)})


# --------------------------------------------------------------------------
# subsets


def subsample(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    if not 0 <= n <= len(ds):
        raise ValueError(f"cannot take {n} items from {len(ds)}")
    idx = np.random.default_rng(seed).permutation(len(ds))[:n]
    return ds.take(idx, f"subsample(n={n}, seed={seed})")


def split(ds: Dataset, sizes, seed: int = 0) -> list[Dataset]:
    """Disjoint random parts. ``sizes`` are counts, or fractions if they sum to at most 1."""
    sizes = list(sizes)
    n = len(ds)
    if all(isinstance(s, float) for s in sizes) and sum(sizes) <= 1.0 + 1e-12:
        counts = [int(round(s * n)) for s in sizes]
    else:
        counts = [int(s) for s in sizes]
    if sum(counts) > n:
        raise ValueError(f"split sizes {counts} exceed dataset size {n}")
    perm = np.random.default_rng(seed).permutation(n)
    out, pos = [], 0
    for c in counts:
        out.append(ds.take(perm[pos:pos + c], f"split(seed={seed})"))
        pos += c
    return out
