import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ella.fileio import FORMAT_VERSION, file_sha256, read_container, write_container
from ella.linalg import (block_diag, cholesky_jittered, psd_sqrt, spd_inverse, spectral_norm,
                         symmetrize)

MAGIC = b"TESTFILE"


@given(st.integers(0, 2 ** 31 - 1))
def test_spectral_norm_matches_svd(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((int(rng.integers(1, 9)), int(rng.integers(1, 9))))
    assert spectral_norm(a) == pytest.approx(np.linalg.norm(a, 2), rel=1e-6)
    s = symmetrize(a @ a.T) - 2 * np.eye(len(a))
    assert spectral_norm(s) == pytest.approx(np.linalg.norm(s, 2), rel=1e-12)


def test_spectral_norm_edge_cases():
    assert spectral_norm(np.zeros((0, 3))) == 0.0
    assert spectral_norm(np.zeros((2, 3))) == 0.0
    with pytest.raises(ValueError):
        spectral_norm(np.zeros(3))


def test_cholesky_escalates_jitter():
    a = np.ones((3, 3))  # rank one PSD
    L, used = cholesky_jittered(a, 1e-14)
    assert used >= 1e-14
    np.testing.assert_allclose(L @ L.T, a + used * np.eye(3), atol=1e-12)


def test_cholesky_gives_up_on_indefinite():
    with pytest.raises(np.linalg.LinAlgError, match="jitter"):
        cholesky_jittered(np.diag([1.0, -1.0]), 1e-10)


def test_psd_sqrt_and_inverse(rng):
    A = rng.standard_normal((4, 4))
    S = A @ A.T + np.eye(4)
    R = psd_sqrt(S)
    np.testing.assert_allclose(R @ R, S, atol=1e-12)
    np.testing.assert_allclose(spd_inverse(S) @ S, np.eye(4), atol=1e-10)
    assert np.all(np.isfinite(psd_sqrt(np.diag([1.0, -1e-15]))))


def test_block_diag():
    blocks = np.arange(8.0).reshape(2, 2, 2)
    B = block_diag(blocks)
    assert B.shape == (4, 4) and B[0, 2] == 0 and B[3, 3] == 7
    assert block_diag(np.zeros((0, 2, 2))).shape == (0, 0)


def test_container_roundtrip(tmp_path, rng):
    arrays = {"a": rng.standard_normal((3, 2)), "s": np.array(2.5), "e": np.zeros((0, 4))}
    path = tmp_path / "x.bin"
    write_container(path, MAGIC, {"note": "hi"}, arrays)
    header, back = read_container(path, MAGIC)
    assert header["note"] == "hi" and header["format_version"] == FORMAT_VERSION
    for k, v in arrays.items():
        np.testing.assert_array_equal(back[k], v)
    h = file_sha256(path)
    write_container(path, MAGIC, {"note": "hi"}, arrays)
    assert file_sha256(path) == h


def test_container_errors(tmp_path):
    path = tmp_path / "x.bin"
    with pytest.raises(ValueError, match="8 bytes"):
        write_container(path, b"short", {}, {})
    write_container(path, MAGIC, {}, {"a": np.ones(4)})
    with pytest.raises(ValueError, match="magic"):
        read_container(path, b"OTHERMAG")
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        read_container(path, MAGIC)
    path.write_bytes(raw + b"\0" * 8)
    with pytest.raises(ValueError, match="trailing"):
        read_container(path, MAGIC)
