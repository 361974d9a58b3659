import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from knnmmd.errors import DataError
from knnmmd.reduce import (clamp_dimension, fit_reduction, flatten, project,
                           standardize_time, unflatten)


def test_constant_matrix_becomes_zero():
    assert np.array_equal(standardize_time(np.full((5, 3), 7.0)), np.zeros((5, 3)))


def test_two_step_column():
    out = standardize_time(np.array([[0.0], [2.0]]))
    assert np.allclose(out.ravel(), [-1.0, 1.0], atol=1e-7)


def test_needs_two_time_steps():
    with pytest.raises(DataError):
        standardize_time(np.ones((1, 4)))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(1, 6)),
                  elements=st.floats(-100, 100, allow_nan=False)))
def test_standardized_columns(x):
    out = standardize_time(x)
    assert np.all(np.abs(out.mean(axis=0)) < 1e-9)
    spread = x.std(axis=0)
    live = spread > 1e-3
    assert np.allclose(out.std(axis=0)[live], 1.0, atol=1e-6)


def test_stack_matches_per_sample():
    x = np.random.default_rng(0).normal(size=(4, 6, 3))
    assert np.allclose(standardize_time(x), np.stack([standardize_time(v) for v in x]))


def test_flatten():
    x = np.array([[1, 2], [3, 4]])
    assert flatten(x).tolist() == [1, 2, 3, 4]
    assert np.array_equal(unflatten(flatten(x), (2, 2)), x)
    assert flatten(np.zeros((100, 52))).shape == (5200,)


def test_collinear_points():
    m = fit_reduction(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]), 1)
    assert np.allclose(m.explained_variance_ratio, [1.0])
    assert np.allclose(m.basis.ravel(), [np.sqrt(0.5)] * 2)


def test_full_basis_reconstructs():
    X = np.random.default_rng(1).normal(size=(20, 6))
    m = fit_reduction(X, 6)
    back = project(m, X) @ m.basis.T + m.mean
    assert np.max(np.abs(back - X)) < 1e-8


def test_against_eigendecomposition():
    X = np.random.default_rng(2).normal(size=(50, 8))
    m = fit_reduction(X, 3)
    cov = np.cov(X, rowvar=False, bias=True)
    eig = np.sort(np.linalg.eigvalsh(cov))[::-1]
    proj_var = project(m, X).var(axis=0)
    assert abs(proj_var.sum() - eig[:3].sum()) < 1e-8
    assert np.allclose(proj_var, eig[:3], atol=1e-8)
    assert np.allclose(m.explained_variance_ratio, eig[:3] / eig.sum(), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 15), d_in=st.integers(1, 10), seed=st.integers(0, 10 ** 6), data=st.data())
def test_model_invariants(n, d_in, seed, data):
    X = np.random.default_rng(seed).normal(size=(n, d_in)) * 3
    d = data.draw(st.integers(1, min(n, d_in)))
    m = fit_reduction(X, d)
    assert np.allclose(m.basis.T @ m.basis, np.eye(d), atol=1e-8)
    Z = project(m, X)
    assert np.all(np.abs(Z.mean(axis=0)) < 1e-8)
    var = Z.var(axis=0)
    assert np.all(np.diff(var) <= 1e-9)
    assert np.all(np.diff(m.explained_variance_ratio) <= 1e-12)
    assert np.all((m.explained_variance_ratio >= 0) & (m.explained_variance_ratio <= 1))
    peak = np.abs(m.basis).argmax(axis=0)
    assert np.all(m.basis[peak, np.arange(d)] > 0)
    again = fit_reduction(X, d)
    assert np.array_equal(again.basis, m.basis)
    a, b = X[0], X[-1]
    assert np.linalg.norm(Z[0] - Z[-1]) <= np.linalg.norm(a - b) + 1e-8


def test_projection_of_mean_is_zero():
    X = np.random.default_rng(3).normal(size=(10, 4))
    m = fit_reduction(X, 2)
    assert np.allclose(project(m, m.mean[None, :]), 0.0)


def test_full_projection_is_isometric():
    X = np.random.default_rng(4).normal(size=(12, 5))
    Z = project(fit_reduction(X, 5), X)
    dx = np.linalg.norm(X[:, None] - X[None], axis=2)
    dz = np.linalg.norm(Z[:, None] - Z[None], axis=2)
    assert np.max(np.abs(dx - dz)) < 1e-8


def test_range_errors():
    X = np.ones((3, 4))
    with pytest.raises(DataError):
        fit_reduction(X, 0)
    with pytest.raises(DataError):
        fit_reduction(X, 5)
    with pytest.raises(DataError):
        fit_reduction(np.ones((1, 4)), 1)
    with pytest.raises(DataError):
        project(fit_reduction(np.random.default_rng(0).normal(size=(3, 4)), 2), np.ones((2, 3)))


def test_degenerate_data_is_flagged():
    m = fit_reduction(np.ones((4, 3)), 2)
    assert m.degenerate
    assert np.all(m.explained_variance_ratio == 0)
    assert np.allclose(m.basis.T @ m.basis, np.eye(2))


def test_clamp_warns():
    X = np.zeros((10, 30))
    with pytest.warns(UserWarning):
        assert clamp_dimension(128, X) == 10
    assert clamp_dimension(5, X) == 5
