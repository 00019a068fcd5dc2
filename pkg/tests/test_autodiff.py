import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import linear_model
from ella.autodiff import (Activation, ArchDescriptor, BatchNorm, Conv2d, Dense, FlatParams,
                           Flatten, calibrate_batchnorm, forward, grad_row, init_params, jacobian,
                           jvp, jvp_multi, load_checkpoint, mlp, save_checkpoint, small_convnet, vjp)


def central_fd(params, x, v, eps=1e-4):
    hi = forward(params.with_values(params.values + eps * v), x)
    lo = forward(params.with_values(params.values - eps * v), x)
    return (hi - lo) / (2 * eps)


def straight_line_mlp(values, sizes, x):
    """Independent evaluator: walks the flat vector layer by layer with explicit loops."""
    pos = 0
    a = list(x)
    for li, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = [[values[pos + o * n_in + i] for i in range(n_in)] for o in range(n_out)]
        pos += n_in * n_out
        b = values[pos:pos + n_out]
        pos += n_out
        z = [sum(W[o][i] * a[i] for i in range(n_in)) + b[o] for o in range(n_out)]
        a = [np.tanh(v) for v in z] if li < len(sizes) - 2 else z
    return np.array(a)


def tiny_conv_arch():
    return ArchDescriptor((2, 6, 6), (Conv2d(2, 3, 3, stride=2, padding=1),
                                      BatchNorm(3, (0.1, -0.2, 0.0), (1.5, 0.7, 2.0)),
                                      Activation("tanh"), Flatten(), Dense(27, 4)))


ARCHS = [mlp(3, [5], 2, "tanh"), mlp(2, [4, 4], 3, "relu"), mlp(1, [6, 6, 6], 1, "tanh"),
         tiny_conv_arch()]


def test_identity_layer():
    arch = ArchDescriptor((2,), (Dense(2, 2),))
    params = FlatParams([1, 0, 0, 1, 0, 0], arch)
    np.testing.assert_array_equal(forward(params, np.array([3.0, -1.0])), [3.0, -1.0])


def test_constant_network():
    arch = ArchDescriptor((2,), (Dense(2, 2),))
    params = FlatParams([0, 0, 0, 0, 1, 1], arch)
    np.testing.assert_array_equal(forward(params, np.array([7.0, -9.0])), [1.0, 1.0])


def test_forward_matches_straight_line_evaluator(rng):
    arch = mlp(2, [5, 4, 3], 2, "tanh")
    params = init_params(arch, 11)
    for x in rng.standard_normal((5, 2)):
        ref = straight_line_mlp(params.values, [2, 5, 4, 3, 2], x)
        np.testing.assert_allclose(forward(params, x), ref, rtol=1e-13, atol=1e-14)


def test_forward_rejects_bad_shape():
    with pytest.raises(ValueError, match="does not match"):
        forward(init_params(mlp(3, [2], 1)), np.zeros(4))


def test_arch_rejects_incompatible_layers():
    with pytest.raises(ValueError):
        ArchDescriptor((3,), (Dense(4, 2),))


def test_jvp_zero_tangent(rng):
    params = init_params(ARCHS[0], 0)
    x = rng.standard_normal(3)
    g, jv = jvp(params, x, np.zeros(params.P))
    np.testing.assert_array_equal(jv, 0.0)
    np.testing.assert_array_equal(g, forward(params, x))


def test_jvp_linear_model():
    params = linear_model([0.5, -0.25])
    _, jv = jvp(params, np.array([1.0, 2.0]), np.array([3.0, 4.0, 0.0]))
    assert jv[0] == pytest.approx(11.0, abs=1e-14)


def test_jvp_rejects_nonfinite_and_wrong_length():
    params = init_params(ARCHS[0], 0)
    v = np.zeros(params.P)
    v[3] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        jvp(params, np.zeros(3), v)
    with pytest.raises(ValueError, match="tangent length"):
        jvp(params, np.zeros(3), np.zeros(params.P + 1))


@pytest.mark.parametrize("arch", ARCHS, ids=["mlp-tanh", "mlp-relu", "mlp-deep", "conv-bn"])
def test_jvp_matches_finite_differences(arch, rng):
    params = init_params(arch, 2).with_values(init_params(arch, 2).values
                                              + 0.1 * rng.standard_normal(arch.n_params))
    x = rng.standard_normal(arch.input_shape)
    v = rng.standard_normal(params.P)
    _, jv = jvp(params, x, v)
    fd = central_fd(params, x, v)
    assert np.max(np.abs(jv - fd) / (np.abs(fd) + 1e-12)) < 1e-4 or \
        np.max(np.abs(jv - fd)) < 1e-8


def test_grad_row_linear_model():
    params = linear_model([0.5, -0.25])
    np.testing.assert_array_equal(grad_row(params, np.array([1.0, 2.0]), 0), [1.0, 2.0, 1.0])


def test_grad_row_index_errors():
    params = init_params(ARCHS[0], 0)
    with pytest.raises(IndexError):
        grad_row(params, np.zeros(3), 2)
    with pytest.raises(IndexError):
        grad_row(params, np.zeros(3), -1)


def test_grad_row_dense_layout(rng):
    # d(Wx + b)_i / dW[o, j] = [o == i] x_j and d/db_o = [o == i]
    arch = ArchDescriptor((3,), (Dense(3, 2),))
    params = init_params(arch, 0)
    x = rng.standard_normal(3)
    for i in range(2):
        expect = np.zeros(8)
        expect[3 * i:3 * i + 3] = x
        expect[6 + i] = 1.0
        np.testing.assert_array_equal(grad_row(params, x, i), expect)


def test_grad_row_against_basis_jvps(rng):
    params = init_params(ARCHS[1], 4)
    x = rng.standard_normal(2)
    for j in rng.choice(params.P, size=20, replace=False):
        e = np.zeros(params.P)
        e[j] = 1.0
        _, jv = jvp(params, x, e)
        for i in range(3):
            assert abs(grad_row(params, x, i)[j] - jv[i]) < 1e-12


@pytest.mark.parametrize("arch", ARCHS, ids=["mlp-tanh", "mlp-relu", "mlp-deep", "conv-bn"])
def test_jacobian_times_v_is_jvp(arch, rng):
    params = init_params(arch, 7)
    X = rng.standard_normal((4,) + arch.input_shape)
    V = rng.standard_normal((3, params.P))
    J = jacobian(params, X)
    _, JV = jvp_multi(params, X, V)
    np.testing.assert_allclose(np.einsum("bcp,tp->bct", J, V), JV, atol=1e-10)


def test_summed_vjp_matches_per_example(rng):
    params = init_params(ARCHS[3], 1)
    X = rng.standard_normal((5,) + ARCHS[3].input_shape)
    ct = rng.standard_normal((2, 5, 4))
    np.testing.assert_allclose(vjp(params, X, ct, per_example=False),
                               vjp(params, X, ct).sum(axis=1), atol=1e-12)


@given(st.integers(0, 2 ** 31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_jvp_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    params = init_params(ARCHS[0], seed % 17)
    x = rng.standard_normal(3)
    v1, v2 = rng.standard_normal((2, params.P))
    _, j1 = jvp(params, x, v1)
    _, j2 = jvp(params, x, v2)
    _, j = jvp(params, x, a * v1 + b * v2)
    np.testing.assert_allclose(j, a * j1 + b * j2, atol=1e-10)


@given(st.integers(0, 2 ** 31 - 1))
def test_grad_row_dot_v_equals_jvp(seed):
    rng = np.random.default_rng(seed)
    arch = ARCHS[seed % 3]
    params = init_params(arch, seed % 13)
    x = rng.standard_normal(arch.input_shape)
    v = rng.standard_normal(params.P)
    _, jv = jvp(params, x, v)
    for i in range(arch.output_dim):
        assert abs(grad_row(params, x, i) @ v - jv[i]) < 1e-10


@given(st.integers(0, 2 ** 31 - 1))
def test_primal_under_jvp_is_bitwise_forward(seed):
    rng = np.random.default_rng(seed)
    arch = ARCHS[seed % 4]
    params = init_params(arch, seed % 5)
    x = rng.standard_normal((3,) + arch.input_shape)
    g, _ = jvp_multi(params, x, rng.standard_normal((2, params.P)))
    assert np.array_equal(g, forward(params, x))


@given(st.lists(st.integers(1, 6), min_size=0, max_size=3), st.integers(1, 4), st.integers(1, 3))
def test_param_count_is_function_of_descriptor(hidden, d, C):
    arch = mlp(d, hidden, C)
    sizes = [d] + hidden + [C]
    assert arch.n_params == sum(i * o + o for i, o in zip(sizes[:-1], sizes[1:]))
    assert arch.output_dim == C
    assert mlp(d, hidden, C).hash() == arch.hash()


def test_flat_params_validation():
    arch = mlp(2, [3], 1)
    with pytest.raises(ValueError, match="expected"):
        FlatParams(np.zeros(arch.n_params + 1), arch)
    with pytest.raises(ValueError, match="non-finite"):
        FlatParams(np.full(arch.n_params, np.inf), arch)


def test_batchnorm_calibration_normalizes(rng):
    arch = small_convnet((1, 8, 8), (2,), 3, kernel_size=3)
    X = rng.uniform(size=(20, 1, 8, 8))
    params = calibrate_batchnorm(init_params(arch, 0), X)
    conv, bn = params.arch.layers[:2]
    assert isinstance(bn, BatchNorm)
    a = conv.apply(params.values[params.arch.layer_slice(0)], X)
    z = bn.apply(params.values[params.arch.layer_slice(1)], a)
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.var(axis=(0, 2, 3)), 1.0, rtol=1e-3)


def test_checkpoint_roundtrip(tmp_path, rng):
    arch = tiny_conv_arch()
    params = init_params(arch, 9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, {"note": "x"})
    back, meta = load_checkpoint(path)
    assert np.array_equal(back.values, params.values)
    assert back.arch.hash() == arch.hash() and meta == {"note": "x"}


def test_checkpoint_truncated(tmp_path):
    params = init_params(mlp(2, [3], 1), 0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(ValueError):
        load_checkpoint(path)
