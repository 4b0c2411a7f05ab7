"""Sparse solvers for the SPD and saddle-point systems.

Two paths are offered for each system type: a sparse LU (the oracle, and the
default for desk-scale sizes) and a preconditioned Krylov method (CG for SPD,
MINRES for saddle points).
Semi-definite problems return the solution orthogonal to the declared kernel
in the inner product given by ``gauge_weights``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.io import mmwrite

from .errors import IncompatibleRHS, NoConvergence, SingularBlock, SingularSystem

log = logging.getLogger(__name__)

DIRECT_LIMIT = 200_000
REG = 1e-8  # relative quasi-definite shift of the direct saddle path
MAX_REFINE = 20
MAX_RESTART = 8


@dataclass
class SolveStats:
    method: str
    n: int
    iterations: int = 0
    residual: float = 0.0
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        out = {"method": self.method, "n": self.n, "iterations": self.iterations,
               "residual": float(self.residual)}
        out.update(self.extra)
        return out


@dataclass
class SparseSystem:
    """``A x = b`` with an optional kernel basis (columns of ``kernel``)."""

    matrix: sp.spmatrix
    rhs: np.ndarray
    kernel: np.ndarray = None
    gauge_weights: np.ndarray = None

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix)
        self.rhs = np.asarray(self.rhs, dtype=float)
        if self.kernel is not None:
            k = np.asarray(self.kernel, dtype=float)
            self.kernel = k.reshape(k.shape[0], -1)
        n = self.matrix.shape[0]
        if self.matrix.shape != (n, n) or self.rhs.shape[0] != n:
            raise ValueError("matrix must be square and match the right-hand side")

    @property
    def n(self):
        return self.matrix.shape[0]


def project_out(x, kernel, weights=None):
    """Remove the kernel component of ``x`` (weighted ``l2`` orthogonality)."""
    if kernel is None:
        return x
    K = kernel
    WK = K if weights is None else K * np.asarray(weights)[:, None]
    G = WK.T @ K
    return x - K @ np.linalg.solve(G, WK.T @ x)


def _check_compatible(b, kernel, tol):
    if kernel is None:
        return
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return
    Q, _ = np.linalg.qr(kernel)
    comp = np.linalg.norm(Q.T @ b) / nb
    if comp > 10 * tol:
        raise IncompatibleRHS(f"right-hand side has kernel component {comp:.3e} (> 10*tol)")


def _residual(A, x, b):
    nb = np.linalg.norm(b)
    r = np.linalg.norm(A @ x - b)
    return r / nb if nb > 0 else r


class SPDFactor:
    """Direct solver for a compatible semi-definite system, factorised once.

    One dof per kernel vector is pinned (chosen by pivoted QR so the pinned
    kernel block is invertible); the reduced matrix is SPD, and for a
    compatible right-hand side the discarded equations hold automatically.
    """

    def __init__(self, A, kernel=None, gauge_weights=None):
        self.A = sp.csr_matrix(A)
        self.kernel = kernel
        self.w = gauge_weights
        n = self.A.shape[0]
        keep = np.ones(n, dtype=bool)
        if kernel is not None:
            _, _, piv = sla.qr(kernel.T, mode="economic", pivoting=True)
            keep[piv[: kernel.shape[1]]] = False
        self.idx = np.flatnonzero(keep)
        Ar = sp.csc_matrix(self.A)[self.idx][:, self.idx]
        try:
            self._lu = spla.splu(Ar, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                 options={"SymmetricMode": True})
        except RuntimeError as err:
            raise SingularSystem(str(err)) from None

    def solve(self, b, tol=1e-10):
        b = np.asarray(b, dtype=float)
        _check_compatible(b, self.kernel, tol)
        x = np.zeros(self.A.shape[0])
        x[self.idx] = self._lu.solve(b[self.idx])
        x = project_out(x, self.kernel, self.w)
        if not np.all(np.isfinite(x)):
            raise SingularSystem("direct solve produced non-finite values")
        b0 = project_out(b, self.kernel) if self.kernel is not None else b
        res = _residual(self.A, x, b0)
        return x, SolveStats("direct", self.A.shape[0], 1, res)


def solve_spd(system: SparseSystem, tol=1e-10, max_iter=None, method="auto"):
    """Solve an SPD (or kernel-compatible semi-definite) system."""
    A, b = system.matrix, system.rhs
    _check_compatible(b, system.kernel, tol)
    res = 0.0
    if method == "auto":
        method = "direct" if system.n <= DIRECT_LIMIT else "cg"
    if method == "direct":
        x, stats = SPDFactor(A, system.kernel, system.gauge_weights).solve(b, tol)
        res = stats.residual
    elif method == "cg":
        d = A.diagonal()
        if np.any(d <= 0):
            raise SingularSystem("non-positive diagonal entry in SPD matrix")
        P = spla.LinearOperator(A.shape, matvec=lambda v: v / d, dtype=float)
        b0 = project_out(b, system.kernel) if system.kernel is not None else b
        it = [0]

        def cb(_):
            it[0] += 1

        x, info = spla.cg(A, b0, rtol=tol, atol=0.0, maxiter=max_iter or 10 * system.n, M=P, callback=cb)
        x = project_out(x, system.kernel, system.gauge_weights)
        res = _residual(A, x, b0)
        stats = SolveStats("cg", system.n, it[0], res)
        if info != 0 and res > tol:
            raise NoConvergence(it[0], res)
    else:
        raise ValueError(f"unknown method '{method}'")
    if res > max(tol, 1e-14) * 10 and method == "direct":
        log.warning("direct SPD solve residual %.3e above tolerance", res)
    return x, stats


class SaddleFactor:
    """Reusable solver for ``[[A, B^T], [B, 0]] (u, p) = (f, g)``.

    ``pressure_kernel`` (columns) spans the constant pressures, one column per
    connected component; returned pressures satisfy ``P^T W p = 0`` with
    ``W = pressure_weights``.  The direct path factorises the matrix with the
    pressure block shifted by ``-delta * pressure_mass`` and refines against
    the unshifted matrix; the iterative path is block-Jacobi MINRES.
    """

    def __init__(self, A, B, pressure_kernel=None, pressure_weights=None, method="auto",
                 pressure_mass=None):
        self.A = sp.csr_matrix(A)
        self.B = sp.csr_matrix(B)
        self.nu, self.np = self.A.shape[0], self.B.shape[0]
        self.P = None if pressure_kernel is None else np.asarray(pressure_kernel, dtype=float).reshape(self.np, -1)
        self.w = pressure_weights
        self.K = sp.bmat([[self.A, self.B.T], [self.B, None]], format="csr")
        if method == "auto":
            method = "direct" if self.nu + self.np <= DIRECT_LIMIT else "minres"
        self.method = method
        self.pressure_mass = pressure_mass
        if method == "direct":
            d = self.A.diagonal()
            if self.nu and np.any(d <= 0):
                raise SingularBlock("velocity block has a non-positive diagonal entry")
            # Quasi-definite shift of the pressure block: any symmetric ordering
            # is then stable, and iterative refinement against the true matrix
            # removes the O(delta) perturbation.
            mp = self._pressure_diag(d)
            delta = REG * np.median(self._schur_diag(d)) / np.median(mp) if self.np else 0.0
            Kd = sp.bmat([[self.A, self.B.T], [self.B, -delta * sp.diags(mp)]], format="csc")
            try:
                self._lu = spla.splu(Kd, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                     options={"SymmetricMode": True})
            except RuntimeError as err:
                raise SingularBlock(str(err)) from None
        elif method != "minres":
            raise ValueError(f"unknown method '{method}'")

    def _schur_diag(self, da):
        dp = np.asarray(self.B.multiply(self.B) @ (1.0 / da)).ravel()
        dp[dp <= 0] = 1.0
        return dp

    def _pressure_diag(self, da):
        if self.pressure_mass is not None:
            return np.asarray(self.pressure_mass, dtype=float)
        return self._schur_diag(da)

    def _gauge(self, x):
        if self.P is None:
            return x
        x = x.copy()
        x[self.nu:] = project_out(x[self.nu:], self.P, self.w)
        return x

    def solve(self, f, g, tol=1e-10, max_iter=None):
        f = np.asarray(f, dtype=float)
        g = np.asarray(g, dtype=float)
        rhs = np.concatenate([f, g])
        if self.method == "direct":
            nb = max(np.linalg.norm(rhs), 1e-300)
            x = self._gauge(self._lu.solve(rhs))
            it = 1
            for it in range(1, MAX_REFINE + 1):
                r = rhs - self.K @ x
                if np.linalg.norm(r) <= 1e-3 * tol * nb:
                    break
                x = self._gauge(x + self._lu.solve(r))
        else:
            x, it = self._minres(rhs, tol, max_iter)
        u, p = x[: self.nu], x[self.nu:]
        if self.P is not None:
            p = project_out(p, self.P, self.w)
        r = self.K @ np.concatenate([u, p]) - rhs
        scale = max(np.linalg.norm(rhs), 1e-300)
        res = float(np.linalg.norm(r) / scale) if np.linalg.norm(rhs) > 0 else float(np.linalg.norm(r))
        stats = SolveStats(self.method, self.nu + self.np, it, res, {
            "momentum_residual": float(np.linalg.norm(r[: self.nu])),
            "continuity_residual": float(np.abs(r[self.nu:]).max()) if self.np else 0.0,
        })
        if not np.all(np.isfinite(r)):
            raise SingularBlock("non-finite solution; the velocity block is rank deficient")
        if res > 10 * tol:
            raise NoConvergence(it, res)
        return u, p, stats

    def _minres(self, rhs, tol, max_iter):
        da = self.A.diagonal().copy()
        if np.any(da <= 0):
            raise SingularBlock("velocity block has a non-positive diagonal entry")
        dp = self._pressure_diag(da)
        dd = np.concatenate([da, dp])
        P = spla.LinearOperator(self.K.shape, matvec=lambda v: v / dd, dtype=float)
        it = [0]

        def cb(_):
            it[0] += 1

        b = rhs
        if self.P is not None:
            # remove the incompatible constant-pressure component of the data
            g = b[self.nu:]
            b = np.concatenate([b[: self.nu], project_out(g, self.P)])
        # MINRES stops on the preconditioned residual; restart on the true one
        maxit = max_iter or 20 * self.K.shape[0]
        nb = max(np.linalg.norm(b), 1e-300)
        x = np.zeros_like(b)
        r = b
        for _ in range(MAX_RESTART):
            dx, info = spla.minres(self.K, r, M=P, rtol=tol, maxiter=maxit, callback=cb)
            x = x + dx
            r = b - self.K @ x
            res = np.linalg.norm(r) / nb
            if info > 0:
                raise NoConvergence(it[0], float(res))
            if res <= tol:
                break
        return x, it[0]


def solve_saddle(A, B, f, g, pressure_kernel=None, pressure_weights=None, tol=1e-10,
                 max_iter=None, method="auto", pressure_mass=None):
    """One-shot saddle solve; see :class:`SaddleFactor`."""
    fac = SaddleFactor(A, B, pressure_kernel, pressure_weights, method, pressure_mass)
    return fac.solve(f, g, tol, max_iter)


def dump_matrix_market(path, matrix, comment=""):
    mmwrite(str(path), sp.coo_matrix(matrix), comment=comment)
