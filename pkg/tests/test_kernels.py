"""Backend equivalence: the compiled kernels must agree with the NumPy
fallback to float64 round-off."""

import numpy as np
import pytest

from uapforge._kernels import _numpy

native = pytest.importorskip("uapforge._kernels._native")


def cases():
    rng = np.random.default_rng(0)
    for n, c, t, k, l in [(1, 1, 8, 1, 3), (4, 3, 20, 2, 5), (8, 8, 64, 8, 17)]:
        x = rng.normal(0.0, 1.0, (n, c, t))
        w = rng.normal(0.0, 0.5, (k, l))
        b = rng.normal(0.0, 0.1, k)
        du = rng.normal(0.0, 1.0, (n, k, c, t - l + 1))
        yield x, w, b, du


@pytest.mark.parametrize("case", list(range(3)))
def test_forward_matches(case):
    x, w, b, _ = list(cases())[case]
    a = native.temporal_conv_forward(x, w, b)
    e = _numpy.temporal_conv_forward(x, w, b)
    np.testing.assert_allclose(a, e, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("case", list(range(3)))
def test_backward_input_matches(case):
    x, w, _, du = list(cases())[case]
    a = native.temporal_conv_backward_input(w, du, x.shape[2])
    e = _numpy.temporal_conv_backward_input(w, du, x.shape[2])
    np.testing.assert_allclose(a, e, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("case", list(range(3)))
def test_backward_weights_matches(case):
    x, w, _, du = list(cases())[case]
    adw, adb = native.temporal_conv_backward_weights(x, du)
    edw, edb = _numpy.temporal_conv_backward_weights(x, du)
    np.testing.assert_allclose(adw, edw, rtol=1e-12)
    np.testing.assert_allclose(adb, edb, rtol=1e-12)


def test_forward_is_correlation_by_hand():
    # one filter, one channel, tiny case checked against explicit sums
    x = np.array([[[1.0, 2.0, 3.0, 4.0]]])
    w = np.array([[1.0, -1.0]])
    b = np.array([0.5])
    expected = np.array([[[[1 - 2 + 0.5, 2 - 3 + 0.5, 3 - 4 + 0.5]]]])
    np.testing.assert_array_equal(_numpy.temporal_conv_forward(x, w, b), expected)
    np.testing.assert_array_equal(native.temporal_conv_forward(x, w, b), expected)


def test_backward_input_is_adjoint():
    # <conv(x), du> == <x, conv_backward_input(du)> for random tensors
    rng = np.random.default_rng(1)
    x = rng.normal(0, 1, (2, 3, 12))
    w = rng.normal(0, 1, (2, 4))
    du = rng.normal(0, 1, (2, 2, 3, 9))
    for impl in (native, _numpy):
        u = impl.temporal_conv_forward(x, w, np.zeros(2))
        dx = impl.temporal_conv_backward_input(w, du, 12)
        assert np.vdot(u, du) == pytest.approx(np.vdot(x, dx), rel=1e-12)
