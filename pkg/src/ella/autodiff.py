"""A miniature layer-list network engine with forward- and reverse-mode derivatives.

Networks are described by an :class:`ArchDescriptor` (an input shape plus a
tuple of layers) and evaluated at a :class:`FlatParams` vector. Three kinds of
pass are supported, all batched over inputs and all in float64:

* plain evaluation (:func:`forward`),
* forward mode, where every activation carries one or more tangents alongside
  its primal value (:func:`jvp`, :func:`jvp_multi`),
* reverse mode, which pulls output cotangents back to per-example parameter
  gradients (:func:`vjp`, :func:`grad_row`, :func:`jacobian`).

Parameter layout: layers in order; inside a layer the weight tensor in
row-major order followed by the bias. Dense weights are ``(out, in)``, conv
weights ``(out_ch, in_ch, k, k)`` and frozen batchnorm stores ``gamma`` then
``beta``. Class indices are 0-based.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from . import fileio

CHECKPOINT_MAGIC = b"ELLACKPT"


# --------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind: ClassVar[str] = "dense"

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ValueError(f"dense layer expects input ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def n_params(self, in_shape):
        return self.out_features * self.in_features + self.out_features

    def _split(self, w):
        n = self.out_features * self.in_features
        return w[..., :n].reshape(w.shape[:-1] + (self.out_features, self.in_features)), w[..., n:]

    def apply(self, w, a):
        W, b = self._split(w)
        return a @ W.T + b

    def tangent(self, w, a, out, dw, da):
        W, _ = self._split(w)
        dW, db = self._split(dw)
        t = np.matmul(a, np.swapaxes(dW, -1, -2)) + db[:, None, :]
        if da is not None:
            t += da @ W.T
        return t

    def pullback(self, w, a, out, g, per_example, need_input):
        W, _ = self._split(w)
        g_in = g @ W if need_input else None
        if per_example:
            gW = g[..., :, None] * a[None, :, None, :]
            gw = np.concatenate([gW.reshape(g.shape[:2] + (-1,)), g], axis=-1)
        else:
            gW = np.einsum("rbo,bi->roi", g, a)
            gw = np.concatenate([gW.reshape(g.shape[0], -1), g.sum(axis=1)], axis=-1)
        return g_in, gw


def _im2col(x, k, stride, padding):
    """``(N, I, H, W)`` to patch tensor ``(N, I*k*k, Ho*Wo)``."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    cols = np.empty((n, c, k, k, ho, wo))
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = x[:, :, di:di + stride * (ho - 1) + 1:stride,
                                   dj:dj + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, c * k * k, ho * wo), ho, wo


def _col2im(cols, in_shape, k, stride, padding, ho, wo):
    """Adjoint of :func:`_im2col`: scatter-add patches back onto the image."""
    n = cols.shape[0]
    c, h, w = in_shape
    cols = cols.reshape(n, c, k, k, ho, wo)
    x = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for di in range(k):
        for dj in range(k):
            x[:, :, di:di + stride * (ho - 1) + 1:stride,
              dj:dj + stride * (wo - 1) + 1:stride] += cols[:, :, di, dj]
    if padding:
        x = x[:, :, padding:-padding, padding:-padding]
    return x


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    kind: ClassVar[str] = "conv2d"

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ValueError(f"conv2d expects input ({self.in_channels}, H, W), got {tuple(in_shape)}")
        _, h, w = in_shape
        ho = (h + 2 * self.padding - self.kernel_size) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel_size) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"conv2d kernel {self.kernel_size} does not fit input {tuple(in_shape)}")
        return (self.out_channels, ho, wo)

    def n_params(self, in_shape):
        return self.out_channels * self.in_channels * self.kernel_size ** 2 + self.out_channels

    def _split(self, w):
        n = self.out_channels * self.in_channels * self.kernel_size ** 2
        return w[..., :n].reshape(w.shape[:-1] + (self.out_channels, -1)), w[..., n:]

    def _conv(self, x, Wm):
        cols, ho, wo = _im2col(x, self.kernel_size, self.stride, self.padding)
        return (Wm @ cols).reshape(x.shape[0], self.out_channels, ho, wo)

    def apply(self, w, a):
        Wm, b = self._split(w)
        return self._conv(a, Wm) + b[:, None, None]

    def tangent(self, w, a, out, dw, da):
        Wm, _ = self._split(w)
        dWm, db = self._split(dw)
        t_count, (bsz, o, ho, wo) = dw.shape[0], out.shape
        cols, _, _ = _im2col(a, self.kernel_size, self.stride, self.padding)
        t = np.matmul(dWm[:, None], cols[None]).reshape(t_count, bsz, o, ho, wo)
        t += db[:, None, :, None, None]
        if da is not None:
            t += self._conv(da.reshape((-1,) + da.shape[2:]), Wm).reshape(t.shape)
        return t

    def pullback(self, w, a, out, g, per_example, need_input):
        Wm, _ = self._split(w)
        r, bsz, o, ho, wo = g.shape
        gm = g.reshape(r, bsz, o, ho * wo)
        cols, _, _ = _im2col(a, self.kernel_size, self.stride, self.padding)
        g_in = None
        if need_input:
            gcols = np.matmul(Wm.T, gm).reshape(r * bsz, -1, ho * wo)
            g_in = _col2im(gcols, a.shape[1:], self.kernel_size, self.stride,
                           self.padding, ho, wo).reshape((r, bsz) + a.shape[1:])
        if per_example:
            gW = np.matmul(gm, np.swapaxes(cols, -1, -2)[None])
            gw = np.concatenate([gW.reshape(r, bsz, -1), gm.sum(-1)], axis=-1)
        else:
            gW = np.einsum("rbol,bcl->roc", gm, cols)
            gw = np.concatenate([gW.reshape(r, -1), gm.sum(axis=(1, 3))], axis=-1)
        return g_in, gw


@dataclass(frozen=True)
class Activation:
    fn: str
    kind: ClassVar[str] = "activation"

    def __post_init__(self):
        if self.fn not in ("tanh", "relu"):
            raise ValueError(f"unsupported activation {self.fn!r}")

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def n_params(self, in_shape):
        return 0

    def apply(self, w, a):
        return np.tanh(a) if self.fn == "tanh" else np.maximum(a, 0.0)

    def _slope(self, a, out):
        return 1.0 - out * out if self.fn == "tanh" else (a > 0).astype(float)

    def tangent(self, w, a, out, dw, da):
        return None if da is None else da * self._slope(a, out)

    def pullback(self, w, a, out, g, per_example, need_input):
        return (g * self._slope(a, out) if need_input else None), None


@dataclass(frozen=True)
class BatchNorm:
    """Batch normalization frozen at inference statistics: a per-channel affine map."""

    num_features: int
    mean: tuple = field(default=())
    var: tuple = field(default=())
    eps: float = 1e-5
    kind: ClassVar[str] = "batchnorm"

    def __post_init__(self):
        if not self.mean:
            object.__setattr__(self, "mean", (0.0,) * self.num_features)
        if not self.var:
            object.__setattr__(self, "var", (1.0,) * self.num_features)
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "var", tuple(float(v) for v in self.var))
        if len(self.mean) != self.num_features or len(self.var) != self.num_features:
            raise ValueError("batchnorm statistics must have num_features entries")
        if min(self.var) < 0:
            raise ValueError("batchnorm variances must be nonnegative")

    def out_shape(self, in_shape):
        if in_shape[0] != self.num_features:
            raise ValueError(f"batchnorm over {self.num_features} channels got input {tuple(in_shape)}")
        return tuple(in_shape)

    def n_params(self, in_shape):
        return 2 * self.num_features

    def _bcast(self, v, ndim):
        return np.asarray(v).reshape((-1,) + (1,) * (ndim - 2))

    def _parts(self, w, a):
        nd = a.ndim
        gamma = self._bcast(w[:self.num_features], nd)
        beta = self._bcast(w[self.num_features:], nd)
        inv = self._bcast(1.0 / np.sqrt(np.asarray(self.var) + self.eps), nd)
        xhat = (a - self._bcast(self.mean, nd)) * inv
        return gamma, beta, inv, xhat

    def apply(self, w, a):
        gamma, beta, _, xhat = self._parts(w, a)
        return gamma * xhat + beta

    def tangent(self, w, a, out, dw, da):
        gamma, _, inv, xhat = self._parts(w, a)
        f = self.num_features
        tail = (1,) * (a.ndim - 2)
        dgamma = dw[:, None, :f].reshape(dw.shape[0], 1, f, *tail)
        dbeta = dw[:, None, f:].reshape(dw.shape[0], 1, f, *tail)
        t = dgamma * xhat + dbeta
        if da is not None:
            t = t + da * (gamma * inv)
        return t

    def pullback(self, w, a, out, g, per_example, need_input):
        gamma, _, inv, xhat = self._parts(w, a)
        g_in = g * (gamma * inv) if need_input else None
        spatial = tuple(range(3, g.ndim))
        ggamma = (g * xhat).sum(axis=spatial) if spatial else g * xhat
        gbeta = g.sum(axis=spatial) if spatial else g
        gw = np.concatenate([ggamma, gbeta], axis=-1)
        if not per_example:
            gw = gw.sum(axis=1)
        return g_in, gw


@dataclass(frozen=True)
class Flatten:
    kind: ClassVar[str] = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def n_params(self, in_shape):
        return 0

    def apply(self, w, a):
        return a.reshape(a.shape[0], -1)

    def tangent(self, w, a, out, dw, da):
        return None if da is None else da.reshape(da.shape[:2] + (-1,))

    def pullback(self, w, a, out, g, per_example, need_input):
        return (g.reshape(g.shape[:2] + a.shape[1:]) if need_input else None), None


_LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv2d, Activation, BatchNorm, Flatten)}


def layer_to_dict(layer) -> dict:
    d = {"kind": layer.kind}
    d.update({k: (list(v) if isinstance(v, tuple) else v) for k, v in layer.__dict__.items()})
    return d


def layer_from_dict(d: dict):
    d = dict(d)
    cls = _LAYER_TYPES[d.pop("kind")]
    return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


# --------------------------------------------------------------------------
# architecture and parameters


@dataclass(frozen=True)
class ArchDescriptor:
    """Input shape plus an ordered tuple of layers.

    Shapes are checked layer by layer at construction; ``n_params`` and the
    per-layer parameter offsets are derived from the descriptor alone.
    """

    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        shapes = [self.input_shape]
        offsets = [0]
        for layer in self.layers:
            offsets.append(offsets[-1] + layer.n_params(shapes[-1]))
            shapes.append(tuple(layer.out_shape(shapes[-1])))
        if len(shapes[-1]) != 1:
            raise ValueError(f"network output must be a vector, got shape {shapes[-1]}")
        object.__setattr__(self, "_shapes", tuple(shapes))
        object.__setattr__(self, "_offsets", tuple(offsets))

    @property
    def n_params(self) -> int:
        return self._offsets[-1]

    @property
    def output_dim(self) -> int:
        return self._shapes[-1][0]

    def layer_slice(self, idx: int) -> slice:
        return slice(self._offsets[idx], self._offsets[idx + 1])

    def last_dense_slice(self) -> slice:
        """Parameter columns of the final layer, which must be dense."""
        for idx in range(len(self.layers) - 1, -1, -1):
            if self.layers[idx].n_params(self._shapes[idx]):
                if not isinstance(self.layers[idx], Dense):
                    raise ValueError("last parametrized layer is not dense")
                return self.layer_slice(idx)
        raise ValueError("architecture has no parameters")

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "layers": [layer_to_dict(layer) for layer in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        return cls(tuple(d["input_shape"]), tuple(layer_from_dict(x) for x in d["layers"]))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def mlp(in_dim: int, hidden, out_dim: int, activation: str = "tanh") -> ArchDescriptor:
    layers = []
    prev = in_dim
    for h in hidden:
        layers += [Dense(prev, h), Activation(activation)]
        prev = h
    layers.append(Dense(prev, out_dim))
    return ArchDescriptor((in_dim,), tuple(layers))


def small_convnet(in_shape=(1, 28, 28), channels=(8, 16), out_dim: int = 10,
                  kernel_size: int = 5, stride: int = 2) -> ArchDescriptor:
    """Strided convolutions, each followed by frozen batchnorm then ReLU, and a dense head."""
    layers = []
    shape = tuple(in_shape)
    for ch in channels:
        conv = Conv2d(shape[0], ch, kernel_size, stride=stride, padding=kernel_size // 2)
        shape = conv.out_shape(shape)
        layers += [conv, BatchNorm(ch), Activation("relu")]
    layers += [Flatten(), Dense(int(np.prod(shape)), out_dim)]
    return ArchDescriptor(tuple(in_shape), tuple(layers))


@dataclass(frozen=True, eq=False)
class FlatParams:
    values: np.ndarray
    arch: ArchDescriptor

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.shape[0] != self.arch.n_params:
            raise ValueError(f"expected {self.arch.n_params} parameters, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise ValueError("parameters contain non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def P(self) -> int:
        return self.values.shape[0]

    def with_values(self, values) -> "FlatParams":
        return FlatParams(values, self.arch)


def init_params(arch: ArchDescriptor, seed: int = 0) -> FlatParams:
    """LeCun-normal weights, zero biases, unit batchnorm scale."""
    rng = np.random.default_rng(seed)
    v = np.zeros(arch.n_params)
    for idx, layer in enumerate(arch.layers):
        s = arch.layer_slice(idx)
        if isinstance(layer, Dense):
            n = layer.in_features * layer.out_features
            v[s.start:s.start + n] = rng.standard_normal(n) / np.sqrt(layer.in_features)
        elif isinstance(layer, Conv2d):
            fan_in = layer.in_channels * layer.kernel_size ** 2
            n = fan_in * layer.out_channels
            v[s.start:s.start + n] = rng.standard_normal(n) / np.sqrt(fan_in)
        elif isinstance(layer, BatchNorm):
            v[s.start:s.start + layer.num_features] = 1.0
    return FlatParams(v, arch)


# --------------------------------------------------------------------------
# passes


@dataclass
class DualBatch:
    """Primal activations with their tangents (leading tangent axis on ``tangent``)."""

    primal: np.ndarray
    tangent: np.ndarray | None


def _as_batch(arch: ArchDescriptor, x):
    x = np.asarray(x, dtype=float)
    if x.shape == arch.input_shape:
        return x[None], True
    if x.ndim == len(arch.input_shape) + 1 and x.shape[1:] == arch.input_shape:
        return x, False
    raise ValueError(f"input shape {x.shape} does not match architecture input {arch.input_shape}")


def _weights(params: FlatParams, idx: int):
    return params.values[params.arch.layer_slice(idx)]


def _forward_batch(params: FlatParams, xb: np.ndarray) -> np.ndarray:
    a = xb
    for idx, layer in enumerate(params.arch.layers):
        a = layer.apply(_weights(params, idx), a)
    return a


def forward(params: FlatParams, x) -> np.ndarray:
    """Network output for one input (``(C,)``) or a batch (``(B, C)``)."""
    xb, single = _as_batch(params.arch, x)
    out = _forward_batch(params, xb)
    return out[0] if single else out


def _push(params: FlatParams, dual: DualBatch, V: np.ndarray) -> DualBatch:
    for idx, layer in enumerate(params.arch.layers):
        w = _weights(params, idx)
        s = params.arch.layer_slice(idx)
        out = layer.apply(w, dual.primal)
        if s.stop > s.start:
            t = layer.tangent(w, dual.primal, out, V[:, s], dual.tangent)
        else:
            t = layer.tangent(w, dual.primal, out, None, dual.tangent)
        dual = DualBatch(out, t)
    return dual


def jvp_multi(params: FlatParams, x, V) -> tuple[np.ndarray, np.ndarray]:
    """Outputs and Jacobian-vector products for several tangents in one pass.

    Returns ``g`` of shape ``(B, C)`` and ``JV`` of shape ``(B, C, T)`` where
    ``JV[b, :, t] = J(x_b) @ V[t]`` (leading batch axis dropped for a single
    input).
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if V.shape[1] != params.P:
        raise ValueError(f"tangent length {V.shape[1]} != number of parameters {params.P}")
    if not np.all(np.isfinite(V)):
        raise ValueError("tangent vector contains non-finite entries")
    xb, single = _as_batch(params.arch, x)
    dual = _push(params, DualBatch(xb, None), V)
    if dual.tangent is None:
        jv = np.zeros((V.shape[0],) + dual.primal.shape)
    else:
        jv = dual.tangent
    jv = np.moveaxis(jv, 0, -1)
    if single:
        return dual.primal[0], jv[0]
    return dual.primal, jv


def jvp(params: FlatParams, x, v) -> tuple[np.ndarray, np.ndarray]:
    """``(g(x), J(x) v)`` from a single forward pass carrying tangent ``v``."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ValueError("jvp takes a single tangent vector; use jvp_multi for several")
    g, jv = jvp_multi(params, x, v[None])
    return g, jv[..., 0]


def vjp(params: FlatParams, x, cotangent, per_example: bool = True) -> np.ndarray:
    """Pull output cotangents back to parameter space.

    ``cotangent`` has shape ``(R, B, C)`` (or ``(B, C)`` for ``R = 1``). With
    ``per_example`` the result is ``(R, B, P)``, row ``[r, b]`` being
    ``cotangent[r, b] @ J(x_b)``; otherwise the batch is summed, giving ``(R, P)``.
    """
    arch = params.arch
    xb, _ = _as_batch(arch, x)
    ct = np.asarray(cotangent, dtype=float)
    squeeze = ct.ndim == 2
    if squeeze:
        ct = ct[None]
    if ct.shape[1:] != (xb.shape[0], arch.output_dim):
        raise ValueError(f"cotangent shape {ct.shape} incompatible with batch {xb.shape[0]}"
                         f" and output dim {arch.output_dim}")
    acts = [xb]
    for idx, layer in enumerate(arch.layers):
        acts.append(layer.apply(_weights(params, idx), acts[-1]))
    r, b = ct.shape[:2]
    grad = np.zeros((r, b, params.P)) if per_example else np.zeros((r, params.P))
    first_param = next((i for i in range(len(arch.layers))
                        if arch.layer_slice(i).stop > arch.layer_slice(i).start), 0)
    g = ct
    for idx in range(len(arch.layers) - 1, -1, -1):
        layer = arch.layers[idx]
        need_input = idx > first_param
        g_in, gw = layer.pullback(_weights(params, idx), acts[idx], acts[idx + 1], g,
                                  per_example, need_input)
        if gw is not None:
            grad[..., arch.layer_slice(idx)] = gw
        if not need_input:
            break
        g = g_in
    return grad[0] if squeeze else grad


def grad_row(params: FlatParams, x, i: int) -> np.ndarray:
    """Gradient of output ``i`` (0-based) with respect to all parameters."""
    C = params.arch.output_dim
    if not 0 <= i < C:
        raise IndexError(f"class index {i} out of range for {C} outputs")
    xb, single = _as_batch(params.arch, x)
    if not single:
        raise ValueError("grad_row takes a single input")
    ct = np.zeros((1, C))
    ct[0, i] = 1.0
    return vjp(params, xb, ct)[0]


def jacobian(params: FlatParams, x) -> np.ndarray:
    """Dense Jacobian, ``(C, P)`` for one input or ``(B, C, P)`` for a batch.

    Built with one reverse pass per output row.
    """
    xb, single = _as_batch(params.arch, x)
    C = params.arch.output_dim
    J = np.empty((xb.shape[0], C, params.P))
    for i in range(C):
        ct = np.zeros((xb.shape[0], C))
        ct[:, i] = 1.0
        J[:, i, :] = vjp(params, xb, ct)
    return J[0] if single else J


def calibrate_batchnorm(params: FlatParams, x) -> FlatParams:
    """Freeze every batchnorm layer at the statistics its input has on ``x``."""
    xb, _ = _as_batch(params.arch, x)
    layers = list(params.arch.layers)
    a = xb
    for idx, layer in enumerate(layers):
        if isinstance(layer, BatchNorm):
            axes = (0,) + tuple(range(2, a.ndim))
            layer = BatchNorm(layer.num_features, tuple(a.mean(axis=axes)),
                              tuple(a.var(axis=axes)), layer.eps)
            layers[idx] = layer
        a = layer.apply(_weights(params, idx), a)
    return FlatParams(params.values, ArchDescriptor(params.arch.input_shape, tuple(layers)))


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: FlatParams, meta: dict | None = None) -> None:
    header = {"arch": params.arch.to_dict(), "P": params.P, "arch_hash": params.arch.hash(),
              "meta": meta or {}}
    fileio.write_container(path, CHECKPOINT_MAGIC, header, {"values": params.values})


def load_checkpoint(path) -> tuple[FlatParams, dict]:
    header, arrays = fileio.read_container(path, CHECKPOINT_MAGIC)
    arch = ArchDescriptor.from_dict(header["arch"])
    if header["P"] != arch.n_params:
        raise ValueError(f"{path}: header P={header['P']} disagrees with architecture ({arch.n_params})")
    return FlatParams(arrays["values"], arch), header.get("meta", {})
