import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metric_cgenn import metric
from metric_cgenn.algebra import DiagonalMetric
from metric_cgenn.errors import ConfigError, ConvergenceError, DimensionError, ShapeError
from metric_cgenn.metric import (
    EigenDecomposition,
    MetricMatrix,
    eigendecompose,
    eigendecompose_backward,
    init_metric,
    transform_input,
    transform_output,
    transform_volume_input,
)


def random_symmetric(rng, n):
    a = rng.standard_normal((n, n))
    return a + a.T


def test_metric_matrix_symmetric_by_construction():
    m = MetricMatrix([[1.0, 2.0], [7.0, 3.0]])
    assert np.array_equal(m.values, m.values.T)
    assert m.values[1, 0] == 2.0
    with pytest.raises(ShapeError):
        MetricMatrix(np.zeros((2, 3)))


def test_init_metric_examples():
    q = DiagonalMetric.euclidean(3)
    np.testing.assert_array_equal(init_metric(q, 0.0, 1).values, np.eye(3))
    m = init_metric(q, 1e-3, 7).values
    assert np.array_equal(m, m.T)
    assert np.abs(m - np.eye(3)).max() <= 2e-3
    mink = DiagonalMetric((1.0, -1.0, -1.0, -1.0))
    m = init_metric(mink, 1e-7, 7).values
    off = m - np.diag(np.diag(m))
    assert np.abs(off).max() <= 2e-7
    np.testing.assert_array_equal(init_metric(mink, 1e-7, 7).values, m)
    with pytest.raises(ConfigError):
        init_metric(q, -1.0, 0)


def test_init_metric_formula():
    q = DiagonalMetric((1.0, -1.0))
    r = np.random.default_rng(11).random((2, 2))
    np.testing.assert_array_equal(init_metric(q, 0.5, 11).values, np.diag([1.0, -1.0]) + 0.5 * (r + r.T))


def test_eigendecompose_examples():
    d = eigendecompose(MetricMatrix(np.diag([2.0, 3.0])))
    np.testing.assert_array_equal(d.eigenvalues, [2.0, 3.0])
    np.testing.assert_array_equal(d.basis, np.eye(2))

    m = np.array([[0.0, 1.0], [1.0, 0.0]])
    d = eigendecompose(MetricMatrix(m))
    np.testing.assert_allclose(d.eigenvalues, [-1.0, 1.0], atol=1e-15)
    s = 1 / math.sqrt(2)
    np.testing.assert_allclose(d.basis[:, 0], [s, -s], atol=1e-15)
    np.testing.assert_allclose(d.basis[:, 1], [s, s], atol=1e-15)
    for i in range(2):
        np.testing.assert_allclose(m @ d.basis[:, i], d.eigenvalues[i] * d.basis[:, i], atol=1e-15)

    d = eigendecompose(MetricMatrix(np.eye(3)))
    np.testing.assert_array_equal(d.eigenvalues, [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(d.basis, np.eye(3))


@pytest.mark.parametrize("n", [2, 3, 4, 8])
def test_eigendecompose_matches_eigh(n):
    rng = np.random.default_rng(n)
    for _ in range(20):
        m = random_symmetric(rng, n)
        d = eigendecompose(MetricMatrix(m))
        ref_lam, ref_u = np.linalg.eigh(m)
        np.testing.assert_allclose(d.eigenvalues, ref_lam, atol=1e-10)
        # same columns up to sign for a non-degenerate spectrum
        np.testing.assert_allclose(np.abs(np.sum(d.basis * ref_u, axis=0)), 1.0, atol=1e-9)
        np.testing.assert_allclose(d.basis @ np.diag(d.eigenvalues) @ d.basis.T, m, atol=1e-10)
        np.testing.assert_allclose(d.basis @ d.basis.T, np.eye(n), atol=1e-10)
        assert abs(abs(d.det_c) - 1) == 0.0
        assert np.all(np.diff(d.eigenvalues) >= 0)


def test_sign_canonicalisation():
    rng = np.random.default_rng(2)
    for _ in range(20):
        d = eigendecompose(MetricMatrix(random_symmetric(rng, 4)))
        for j in range(4):
            col = d.basis[:, j]
            assert col[np.argmax(np.abs(col))] > 0


def test_convergence_failure(monkeypatch):
    monkeypatch.setattr(metric, "JACOBI_MAX_SWEEPS", 0)
    with pytest.raises(ConvergenceError):
        eigendecompose(MetricMatrix([[1.0, 0.5], [0.5, 2.0]]))


def test_consistency_of_change_of_coords():
    rng = np.random.default_rng(8)
    m = random_symmetric(rng, 5)
    d = eigendecompose(MetricMatrix(m))
    x, y = rng.standard_normal((2, 5))
    cx, cy = d.change_of_coords @ x, d.change_of_coords @ y
    np.testing.assert_allclose(x @ m @ y, cx @ np.diag(d.eigenvalues) @ cy, atol=1e-10)
    np.testing.assert_allclose(transform_input(x, d), cx, atol=1e-15)


def test_backward_examples():
    rng = np.random.default_rng(1)
    m = random_symmetric(rng, 3)
    d = eigendecompose(MetricMatrix(m))
    g = rng.standard_normal(3)
    np.testing.assert_allclose(eigendecompose_backward(d, g, np.zeros((3, 3))),
                               d.basis @ np.diag(g) @ d.basis.T, atol=1e-14)
    d = eigendecompose(MetricMatrix(np.diag([1.0, 2.0])))
    np.testing.assert_array_equal(eigendecompose_backward(d, [1.0, 0.0], None), [[1.0, 0.0], [0.0, 0.0]])


def _loss(m, g_lam, g_u):
    d = eigendecompose(MetricMatrix(m))
    return g_lam @ d.eigenvalues + np.sum(g_u * d.basis)


@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n = 3
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    m = (q * np.array([-1.0, 0.5, 2.0])) @ q.T
    g_lam, g_u = rng.standard_normal(n), rng.standard_normal((n, n))
    grad = eigendecompose_backward(eigendecompose(MetricMatrix(m)), g_lam, g_u)
    assert np.array_equal(grad, grad.T)
    h = 1e-5
    for i in range(n):
        for j in range(i, n):
            dm = np.zeros((n, n))
            dm[i, j] = dm[j, i] = 1.0
            fd = (_loss(m + h * dm, g_lam, g_u) - _loss(m - h * dm, g_lam, g_u)) / (2 * h)
            an = np.sum(grad * dm)
            assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-3)


def test_backward_degenerate_spectrum_is_finite():
    d = eigendecompose(MetricMatrix(np.eye(3)))
    g = eigendecompose_backward(d, np.ones(3), np.ones((3, 3)))
    assert np.all(np.isfinite(g))
    assert np.array_equal(g, g.T)


def test_backward_unsymmetrised_when_asked():
    rng = np.random.default_rng(3)
    d = eigendecompose(MetricMatrix(random_symmetric(rng, 3)))
    g = eigendecompose_backward(d, None, rng.standard_normal((3, 3)), symmetrize=False)
    assert not np.allclose(g, g.T)


def test_transform_input_identity_and_swap():
    x = np.array([0.3, -1.0, 2.0])
    d = eigendecompose(MetricMatrix(np.eye(3)))
    np.testing.assert_array_equal(transform_input(x, d), x)
    # canonical basis columns (1,-1)/sqrt2 and (1,1)/sqrt2 give C x = U^T x
    d = eigendecompose(MetricMatrix([[0.0, 1.0], [1.0, 0.0]]))
    s = 1 / math.sqrt(2)
    np.testing.assert_allclose(transform_input([1.0, 0.0], d), [s, s], atol=1e-15)
    with pytest.raises(DimensionError):
        transform_input([1.0, 2.0, 3.0], d)


def test_transform_output_examples():
    d = eigendecompose(MetricMatrix([[0.0, 1.0], [1.0, 0.0]]))
    assert transform_output(0.7, "scalar", d) == 0.7
    assert transform_output(0.7, "probability", d) == 0.7
    x = np.array([0.2, -3.0])
    np.testing.assert_allclose(transform_output(transform_input(x, d), "point", d), x, atol=1e-15)
    flip = EigenDecomposition(np.array([1.0, 2.0]), np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert flip.det_c == -1.0
    assert transform_output(2.0, "volume", flip) == -2.0
    with pytest.raises(ConfigError):
        transform_output(1.0, "vector", d)


def test_transform_volume_input():
    ident = EigenDecomposition(np.array([1.0, 1.0]), np.eye(2))
    flip = EigenDecomposition(np.array([1.0, 2.0]), np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert transform_volume_input(0.3, ident) == 0.3
    assert transform_volume_input(0.3, flip) == -0.3
    for d in (ident, flip):
        assert transform_output(transform_volume_input(0.3, d), "volume", d) == 0.3


sym3 = arrays(np.float64, (3, 3), elements=st.floats(-100, 100, allow_nan=False, width=64))


@settings(max_examples=200, deadline=None)
@given(sym3)
def test_reconstruction_hypothesis(a):
    m = MetricMatrix(a).values
    d = eigendecompose(MetricMatrix(m))
    scale = 1 + np.abs(m).max()
    assert np.abs(d.basis @ np.diag(d.eigenvalues) @ d.basis.T - m).max() <= 1e-10 * scale
    assert np.abs(d.basis @ d.basis.T - np.eye(3)).max() <= 1e-10
