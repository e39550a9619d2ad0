import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from oracles import conv2d_loops, depthwise_loops
from xunit import tensor
from xunit.errors import DimensionError


def test_conv2d_identity_kernel():
    x = np.ones((1, 1, 3, 3))
    npt.assert_array_equal(tensor.conv2d(x, np.ones((1, 1, 1, 1))), x)


def test_conv2d_zero_input_gives_bias():
    k = np.random.default_rng(0).normal(size=(3, 2, 3, 3))
    out = tensor.conv2d(np.zeros((2, 2, 5, 5)), k, bias=np.array([1.0, -2.0, 0.5]), pad=1)
    for o, b in enumerate([1.0, -2.0, 0.5]):
        assert np.all(out[:, o] == b)


def test_conv2d_matches_loop_oracle(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    npt.assert_allclose(tensor.conv2d(x, k, b, pad=1), conv2d_loops(x, k, b, pad=1), atol=1e-12)
    npt.assert_allclose(tensor.conv2d(x, k, pad=0), conv2d_loops(x, k, pad=0), atol=1e-12)


def test_conv2d_nonsquare_kernel_and_large_pad(rng):
    x = rng.normal(size=(1, 2, 5, 6))
    k = rng.normal(size=(3, 2, 3, 5))
    npt.assert_allclose(tensor.conv2d(x, k, pad=2), conv2d_loops(x, k, pad=2), atol=1e-12)


def test_conv2d_chunked_patch_matrix(monkeypatch, rng):
    monkeypatch.setattr(tensor, "_IM2COL_BUDGET", 1)
    x = rng.normal(size=(3, 2, 6, 6))
    k = rng.normal(size=(2, 2, 3, 3))
    npt.assert_allclose(tensor.conv2d(x, k, pad=1), conv2d_loops(x, k, pad=1), atol=1e-12)


def test_conv2d_dimension_errors():
    with pytest.raises(DimensionError, match="in_channels"):
        tensor.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(DimensionError, match="bias"):
        tensor.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 3, 3)), bias=np.zeros(2))
    with pytest.raises(DimensionError):
        tensor.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 2, 3, 3)))


def test_conv2d_linearity(rng):
    x, y = rng.normal(size=(2, 2, 3, 7, 7))
    k = rng.normal(size=(2, 3, 3, 3))
    a, b = 0.7, -1.3
    lhs = tensor.conv2d(a * x + b * y, k, pad=1)
    rhs = a * tensor.conv2d(x, k, pad=1) + b * tensor.conv2d(y, k, pad=1)
    npt.assert_allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(half=st.integers(0, 3), h=st.integers(1, 9), w=st.integers(1, 9))
def test_same_padding_preserves_size(half, h, w):
    k = 2 * half + 1
    out = tensor.conv2d(np.ones((1, 2, h, w)), np.ones((1, 2, k, k)), pad=half)
    assert out.shape == (1, 1, h, w)


@pytest.mark.parametrize("method", ["direct", "fft", "auto"])
def test_depthwise_delta_kernel_is_identity(method, rng):
    x = rng.normal(size=(2, 3, 10, 11))
    k = np.zeros((3, 9, 9))
    k[:, 4, 4] = 1.0
    npt.assert_allclose(tensor.depthwise_conv2d(x, k, pad=4, method=method), x, atol=1e-12)


@pytest.mark.parametrize("method", ["direct", "fft"])
def test_depthwise_matches_loop_oracle(method, rng):
    x = rng.normal(size=(1, 64, 16, 16))
    k = rng.normal(size=(64, 9, 9))
    npt.assert_allclose(tensor.depthwise_conv2d(x, k, pad=4, method=method),
                        depthwise_loops(x, k, pad=4), atol=1e-12)


def test_depthwise_small_kernel_and_no_pad(rng):
    x = rng.normal(size=(2, 3, 6, 5))
    k = rng.normal(size=(3, 3, 3))
    for method in ("direct", "fft"):
        npt.assert_allclose(tensor.depthwise_conv2d(x, k, pad=0, method=method),
                            depthwise_loops(x, k, pad=0), atol=1e-12)


def test_depthwise_channel_isolation(rng):
    x = rng.normal(size=(1, 4, 12, 12))
    k = rng.normal(size=(4, 9, 9))
    base = tensor.depthwise_conv2d(x, k, pad=4)
    x2 = x.copy()
    x2[:, 2] += rng.normal(size=(12, 12))
    diff = np.abs(tensor.depthwise_conv2d(x2, k, pad=4) - base).reshape(4, -1).max(axis=1)
    assert diff[2] > 0
    assert np.all(diff[[0, 1, 3]] == 0)


def test_depthwise_equals_block_diagonal_conv(rng):
    x = rng.normal(size=(2, 3, 9, 9))
    k = rng.normal(size=(3, 5, 5))
    full = np.zeros((3, 3, 5, 5))
    for c in range(3):
        full[c, c] = k[c]
    npt.assert_allclose(tensor.depthwise_conv2d(x, k, pad=2), tensor.conv2d(x, full, pad=2),
                        atol=1e-12)


def test_depthwise_channel_mismatch():
    with pytest.raises(DimensionError):
        tensor.depthwise_conv2d(np.zeros((1, 3, 5, 5)), np.zeros((2, 3, 3)))


def test_depthwise_float32_stays_float32(rng):
    x = rng.normal(size=(1, 2, 12, 12)).astype(np.float32)
    k = rng.normal(size=(2, 9, 9)).astype(np.float32)
    assert tensor.depthwise_conv2d(x, k, pad=4).dtype == np.float32
    assert tensor.conv2d(x, rng.normal(size=(1, 2, 3, 3)).astype(np.float32)).dtype == np.float32


def test_hadamard():
    a = np.array([2.0, -3.0]).reshape(1, 1, 1, 2)
    b = np.array([0.5, 1.0]).reshape(1, 1, 1, 2)
    npt.assert_array_equal(tensor.hadamard(a, b).ravel(), [1.0, -3.0])
    x = np.random.default_rng(1).normal(size=(2, 3, 4, 4))
    npt.assert_array_equal(tensor.hadamard(x, np.ones_like(x)), x)
    npt.assert_array_equal(tensor.hadamard(x, np.zeros_like(x)), np.zeros_like(x))
    with pytest.raises(DimensionError):
        tensor.hadamard(x, np.ones((2, 3, 4, 5)))


def test_elementwise():
    x = np.random.default_rng(2).normal(size=(1, 2, 3, 3))
    npt.assert_array_equal(tensor.elementwise(x, np.zeros_like(x), "add"), x)
    npt.assert_array_equal(tensor.elementwise(x, x, "sub"), np.zeros_like(x))
    v = np.array([1.0, 2.0]).reshape(1, 1, 1, 2)
    npt.assert_array_equal(tensor.elementwise(v, 2, "scale").ravel(), [2.0, 4.0])
    npt.assert_array_equal(tensor.elementwise(x, x, "mul"), x * x)
    with pytest.raises(DimensionError):
        tensor.elementwise(x, np.ones((1, 2, 3, 4)), "add")
    with pytest.raises(ValueError):
        tensor.elementwise(x, x, "div")
