import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import mmread

from memhomog import linsolve as ls
from memhomog import verify as vf
from memhomog.errors import IncompatibleRHS, NoConvergence, SingularBlock


def laplace_1d(n, periodic=False):
    main = 2.0 * np.ones(n)
    A = sp.diags([-np.ones(n - 1), main, -np.ones(n - 1)], [-1, 0, 1], format="lil")
    if periodic:
        A[0, n - 1] = A[n - 1, 0] = -1.0
    return A.tocsr()


def stokes_1d(n):
    """Small saddle system: SPD velocity block, full-rank divergence."""
    rng = np.random.default_rng(3)
    A = laplace_1d(2 * n) + sp.eye(2 * n)
    B = sp.csr_matrix(rng.standard_normal((n, 2 * n)))
    return A, B


@pytest.mark.parametrize("method", ["direct", "cg"])
def test_spd_solve(method, rng):
    A = laplace_1d(40)
    x0 = rng.standard_normal(40)
    x, st_ = ls.solve_spd(ls.SparseSystem(A, A @ x0), tol=1e-12, method=method)
    assert np.allclose(x, x0, atol=1e-8)
    assert st_.residual < 1e-10


@pytest.mark.parametrize("method", ["direct", "cg"])
def test_semidefinite_gauge(method, rng):
    n = 30
    A = laplace_1d(n, periodic=True)
    one = np.ones((n, 1))
    b = rng.standard_normal(n)
    b -= b.mean()
    x, _ = ls.solve_spd(ls.SparseSystem(A, b, kernel=one), tol=1e-12, method=method)
    assert abs(x.sum()) < 1e-10
    assert np.abs(A @ x - b).max() < 1e-8


def test_incompatible_rhs_rejected():
    n = 10
    A = laplace_1d(n, periodic=True)
    with pytest.raises(IncompatibleRHS):
        ls.solve_spd(ls.SparseSystem(A, np.ones(n), kernel=np.ones((n, 1))))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        ls.SparseSystem(laplace_1d(4), np.zeros(5))


@pytest.mark.parametrize("method", ["direct", "minres"])
def test_saddle_solve(method, rng):
    A, B = stokes_1d(12)
    u0 = rng.standard_normal(24)
    p0 = rng.standard_normal(12)
    f, g = A @ u0 + B.T @ p0, B @ u0
    u, p, stats = ls.solve_saddle(A, B, f, g, tol=1e-12, method=method)
    assert np.allclose(u, u0, atol=1e-8) and np.allclose(p, p0, atol=1e-8)
    assert stats.residual < 1e-10


def test_saddle_pressure_kernel(rng):
    # B with constant pressures in its left kernel: B^T 1 = 0
    n = 8
    A = laplace_1d(n) + sp.eye(n)
    D = sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)).tocsr()
    B = sp.vstack([D, -sp.csr_matrix(np.ones((1, n - 1)) @ D.toarray())]).tocsr()
    assert np.allclose(B.T @ np.ones(n), 0)
    u, p, _ = ls.solve_saddle(A, B, rng.standard_normal(n), np.zeros(n),
                              pressure_kernel=np.ones(n), tol=1e-11)
    assert abs(p.sum()) < 1e-10
    assert np.abs(B @ u).max() < 1e-9


def test_minres_and_direct_agree(rng):
    A, B = stokes_1d(20)
    f, g = rng.standard_normal(40), rng.standard_normal(20)
    ud, pd, _ = ls.solve_saddle(A, B, f, g, tol=1e-12, method="direct")
    um, pm, _ = ls.solve_saddle(A, B, f, g, tol=1e-12, method="minres")
    assert np.allclose(ud, um, atol=1e-9) and np.allclose(pd, pm, atol=1e-9)


def test_minres_iteration_cap():
    A, B = stokes_1d(20)
    with pytest.raises(NoConvergence):
        ls.solve_saddle(A, B, np.ones(40), np.ones(20), tol=1e-14, max_iter=2, method="minres")


def test_singular_velocity_block():
    A = sp.diags([1.0, 0.0, 1.0]).tocsr()
    B = sp.csr_matrix(np.ones((1, 3)))
    with pytest.raises(SingularBlock):
        ls.SaddleFactor(A, B, method="direct")


def test_saddle_block_structure(rng):
    A, B = stokes_1d(6)
    fac = ls.SaddleFactor(A, B)
    assert vf.fd_check("saddle", fac, rng.standard_normal(fac.nu), rng.standard_normal(fac.np)) < 1e-15


def test_matrix_market_dump(tmp_path):
    A = laplace_1d(5)
    p = tmp_path / "a.mtx"
    ls.dump_matrix_market(p, A, comment="laplace")
    assert np.allclose(mmread(str(p)).toarray(), A.toarray())


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(3, 25))
def test_projected_solution_is_gauge_orthogonal(seed, n):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.5, 2.0, n)
    A = laplace_1d(n, periodic=True)
    b = rng.standard_normal(n)
    b -= b.mean()
    x, _ = ls.solve_spd(ls.SparseSystem(A, b, kernel=np.ones((n, 1)), gauge_weights=w), tol=1e-12)
    assert abs(w @ x) <= 1e-9 * max(1.0, np.abs(x).max())
