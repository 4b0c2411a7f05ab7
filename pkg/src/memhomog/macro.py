"""Homogenised two-bulk problem: Stokes in Omega^+/- coupled across Sigma.

Both bulks are MAC boxes (see :mod:`memhomog.grid`).  Lateral walls are
no-slip, the far top/bottom walls are stress free, and on ``Sigma`` the
tangential velocity traces are free wall slots while the normal velocity is a
single set of unknowns shared by both boxes.  The interface terms are the
symmetric form ``int_Sigma X^T S X`` with ``X = (du/dt, v^+, v^-)`` and ``S``
the Gram matrix of the cell family, evaluated at the centres of the ``Sigma``
cells.  Written with ``S`` the weak form is symmetric, so implicit Euler
dissipates the discrete energy for every step size.

gamma=1: ``u_0`` carries a Q1 in-plane part with ``A*`` stiffness and one
out-of-plane value per ``Sigma`` cell (an ODE; that row has no derivatives).
gamma=3: ``u_0^3`` is a clamped C^1 Hermite (1D) or Bogner-Fox-Schmit (2D)
plate, ``u_1`` a quasi-static Q1 field.
"""

from __future__ import annotations

import ast
import csv
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .cell_elastic import ElasticEffectiveTensors
from .cell_stokes import FluidInterfaceCoefficients
from .errors import BlowUp, ConfigError, DimensionMismatch, MissingCoefficient
from .geometry import MacroDomain
from .grid import MacGrid, StrainOperator
from .linsolve import SaddleFactor

log = logging.getLogger(__name__)

SIDES = ("+", "-")
BLOWUP_FACTOR = 1e6
_GX, _GW = np.polynomial.legendre.leggauss(4)
_GX = 0.5 * (_GX + 1.0)
_GW = 0.5 * _GW


# ---------------------------------------------------------------- surface elements

class Space1D:
    """Clamped 1D space on ``n`` cells: ``'hat'`` (P1) or ``'hermite'`` (C^1 cubic).

    Dofs live on the interior nodes ``1..n-1``; Hermite nodes carry
    ``(value, slope)`` in that order.
    """

    def __init__(self, kind, n, h):
        if kind not in ("hat", "hermite"):
            raise ValueError(kind)
        self.kind, self.n, self.h = kind, int(n), float(h)
        per = 1 if kind == "hat" else 2
        self.size = per * (self.n - 1)
        c = np.arange(self.n)
        if kind == "hat":
            cols = [c - 1, c]
        else:
            cols = [2 * (c - 1), 2 * (c - 1) + 1, 2 * c, 2 * c + 1]
        dofs = np.stack(cols, axis=1)
        left = np.zeros_like(dofs, dtype=bool)
        left[:, : per] = (c == 0)[:, None]
        right = np.zeros_like(dofs, dtype=bool)
        right[:, per:] = (c == self.n - 1)[:, None]
        dofs[left | right] = -1
        self.dofs = dofs

    def local(self, xi, r=0):
        """Local basis (rows) or its ``r``-th x-derivative at reference points ``xi``."""
        x = np.asarray(xi, dtype=float)
        h = self.h
        if self.kind == "hat":
            tab = {0: [1 - x, x], 1: [-np.ones_like(x), np.ones_like(x)],
                   2: [np.zeros_like(x), np.zeros_like(x)]}[r]
            return np.array(tab) / h ** r
        tab = {
            0: [1 - 3 * x**2 + 2 * x**3, h * (x - 2 * x**2 + x**3), 3 * x**2 - 2 * x**3, h * (-x**2 + x**3)],
            1: [-6 * x + 6 * x**2, h * (1 - 4 * x + 3 * x**2), 6 * x - 6 * x**2, h * (-2 * x + 3 * x**2)],
            2: [-6 + 12 * x, h * (-4 + 6 * x), 6 - 12 * x, h * (-2 + 6 * x)],
        }[r]
        return np.array(tab) / h ** r

    def eval_matrix(self, xi=0.5, r=0):
        """Values at reference point ``xi`` of every cell, shape ``(n, size)``."""
        loc = self.local([xi], r)[:, 0]
        M = np.zeros((self.n, self.size))
        for a in range(self.dofs.shape[1]):
            ok = self.dofs[:, a] >= 0
            M[np.flatnonzero(ok), self.dofs[ok, a]] += loc[a]
        return M


def _mixed1d(A, ra, B, rb):
    """``M[i, j] = int phi_i^(ra) psi_j^(rb) dx``."""
    la = A.local(_GX, ra)
    lb = B.local(_GX, rb)
    loc = (la * (_GW * A.h)) @ lb.T
    M = np.zeros((A.size, B.size))
    for a in range(la.shape[0]):
        for b in range(lb.shape[0]):
            ok = (A.dofs[:, a] >= 0) & (B.dofs[:, b] >= 0)
            np.add.at(M, (A.dofs[ok, a], B.dofs[ok, b]), loc[a, b])
    return M


class TensorSpace:
    """Tensor product of 1D spaces over the ``Sigma`` cells (C order)."""

    def __init__(self, kind, cells, h):
        self.kind = kind
        self.axes = [Space1D(kind, n, h) for n in cells]
        self.size = int(np.prod([s.size for s in self.axes]))

    @property
    def n(self):
        return len(self.axes)

    def mixed(self, other, ra, rb):
        out = None
        for A, B, a, b in zip(self.axes, other.axes, ra, rb):
            m = sp.csr_matrix(_mixed1d(A, a, B, b))
            out = m if out is None else sp.kron(out, m, format="csr")
        return out

    def centre_eval(self, r=None):
        r = r or (0,) * self.n
        out = None
        for A, a in zip(self.axes, r):
            m = sp.csr_matrix(A.eval_matrix(0.5, a))
            out = m if out is None else sp.kron(out, m, format="csr")
        return out


def _unit(n, *axes):
    o = [0] * n
    for a in axes:
        o[a] += 1
    return tuple(o)


def vector_stiffness(P, T):
    """``int T_{abcd} d_b psi_a d_d u_c`` for a vector field in ``P`` (minor-symmetric ``T``)."""
    n = P.n
    blocks = [[None] * n for _ in range(n)]
    for al, ga in itertools.product(range(n), repeat=2):
        acc = sp.csr_matrix((P.size, P.size))
        for be, de in itertools.product(range(n), repeat=2):
            t = T[al, be, ga, de]
            if t != 0.0:
                acc = acc + t * P.mixed(P, _unit(n, be), _unit(n, de))
        blocks[al][ga] = acc
    return sp.bmat(blocks, format="csr")


def plate_matrices(H, P, a, b, c):
    """``(K_uu, K_uz, K_zz)`` of the plate energy ``a E:E + 2 Q:bE + c Q:Q``.

    ``Q`` is the Hessian of the deflection (space ``H``), ``E`` the strain of
    the in-plane field (vector space ``P``).
    """
    n = H.n
    Kuu = sp.csr_matrix((H.size, H.size))
    for al, be, ga, de in itertools.product(range(n), repeat=4):
        if c[al, be, ga, de] != 0.0:
            Kuu = Kuu + c[al, be, ga, de] * H.mixed(H, _unit(n, al, be), _unit(n, ga, de))
    cols = []
    for ga in range(n):
        acc = sp.csr_matrix((H.size, P.size))
        for al, be, de in itertools.product(range(n), repeat=3):
            if b[al, be, ga, de] != 0.0:
                acc = acc + b[al, be, ga, de] * H.mixed(P, _unit(n, al, be), _unit(n, de))
        cols.append(acc)
    Kuz = sp.hstack(cols, format="csr")
    Kzz = vector_stiffness(P, a)
    return Kuu, Kuz, Kzz


# ---------------------------------------------------------------- bulk boxes

class BulkBox:
    """MAC Stokes operators on one box.

    ``walls`` maps ``(axis, side)`` (side 0 = low, 1 = high) to
    ``'dirichlet'``, ``'slip'`` (normal fixed, tangential stress free) or
    ``'free'`` (stress free).
    """

    def __init__(self, shape, h, origin, walls):
        self.grid = g = MacGrid(shape, h, [False] * len(shape), origin)
        d = g.dim
        self.op = StrainOperator(g)
        self.A = self.op.energy_matrix("all")
        self.B = g.cell_volume * g.divergence_matrix()  # rows: int_cell div v
        self.mass = g.face_mass()
        fixed = []
        for k in range(d):
            f = ~g.used(k)
            for (j, side), kind in walls.items():
                if kind == "free" or (kind == "slip" and j != k):
                    continue
                sl = [slice(None)] * d
                sl[j] = 0 if side == 0 else -1
                f[tuple(sl)] = True
            fixed.append(f)
        self.fixed = g.full(fixed).astype(bool)

    def sample(self, fn):
        """Face samples of ``fn(k, coords) -> array``."""
        return self.grid.sample_field(fn)


def _restriction(gidx, n):
    ok = np.flatnonzero(gidx >= 0)
    return sp.csr_matrix((np.ones(ok.size), (gidx[ok], ok)), shape=(n, gidx.size))


# ---------------------------------------------------------------- interface

def interface_gram(coeffs: FluidInterfaceCoefficients):
    """``S`` over ``(du/dt, v^+, v^-)``: ``S[G,G]=L^G``, ``S[a,G]=L^a``, ``S[b,a]=B^{ab}``."""
    L, B = coeffs.L, coeffs.B
    Lg = np.asarray(coeffs.L_gamma)
    S = np.block([
        [Lg, L["+"].T, L["-"].T],
        [L["+"], B["++"], B["-+"]],
        [L["-"], B["+-"], B["--"]],
    ])
    return S


@dataclass
class InterfaceOperator:
    """Assembled ``Sigma`` form: ``C = h^{d-1} P^T (I_m (x) S) P``."""

    dim: int
    S: np.ndarray
    P: sp.csr_matrix  # (3 d m, n_primary): traces at the Sigma cell centres
    weight: float
    matrix: sp.csr_matrix = None

    def __post_init__(self):
        m = self.P.shape[0] // (3 * self.dim)
        self.m = m
        blk = sp.kron(sp.identity(m, format="csr"), sp.csr_matrix(self.S), format="csr")
        self.matrix = (self.weight * (self.P.T @ blk @ self.P)).tocsr()
        self.matrix = 0.5 * (self.matrix + self.matrix.T)

    def traces(self, y):
        """``(m, 3, d)``: per Sigma cell the triple ``(du/dt, v^+, v^-)``."""
        return (self.P @ y).reshape(self.m, 3, self.dim)

    def form(self, X):
        """``sum_q h^{d-1} X_q^T S X_q`` for raw triples ``X`` of shape ``(m, 3, d)``."""
        Z = np.asarray(X, dtype=float).reshape(-1, 3 * self.dim)
        return float(self.weight * np.einsum("qi,ij,qj->", Z, self.S, Z))


# ---------------------------------------------------------------- state

@dataclass
class MacroState:
    """Time level of the coupled problem.

    ``y`` holds the primary unknowns ``(v, elastic velocities [, u_1])`` in the
    layout of :class:`MacroProblem`; ``p`` the pressures of ``Omega^+`` then
    ``Omega^-``; ``u`` the displacement arrays.
    """

    t: float
    y: np.ndarray
    p: np.ndarray
    u: dict
    step: int = 0
    info: dict = field(default_factory=dict)

    def copy(self):
        return MacroState(self.t, self.y.copy(), self.p.copy(), {k: v.copy() for k, v in self.u.items()},
                          self.step, dict(self.info))


class MacroProblem:
    """Time-step factory for the monolithic system (see :func:`assemble_macro`)."""

    def __init__(self, domain: MacroDomain, coeffs: FluidInterfaceCoefficients,
                 elas: ElasticEffectiveTensors, gamma, freeze_displacement=False):
        if gamma not in (1, 3):
            raise ValueError("gamma must be 1 or 3")
        d = domain.dim
        if coeffs.dim != d or elas.dim != d:
            raise DimensionMismatch(f"domain dim {d}, fluid coefficients {coeffs.dim}, elastic tensors {elas.dim}")
        self.domain, self.coeffs, self.elas, self.gamma = domain, coeffs, elas, gamma
        self.freeze = bool(freeze_displacement)
        self.dim = d
        h = self.h = domain.h
        N = self.N = tuple(domain.sigma_cells)
        nz = self.nz = domain.nz
        self.m = int(np.prod(N))
        e = d - 1

        walls = {(j, s): "dirichlet" for j in range(e) for s in (0, 1)}
        walls.update({(e, 0): "free", (e, 1): "free"})
        a = tuple(float(v) for v in domain.a)
        self.boxes = {
            "+": BulkBox(N + (nz,), h, a + (0.0,), walls),
            "-": BulkBox(N + (nz,), h, a + (-float(domain.H),), walls),
        }
        bp, bm = self.boxes["+"], self.boxes["-"]

        # global velocity numbering; the Sigma normal faces of Omega^- reuse those of Omega^+
        gp = np.full(bp.grid.n_faces, -1, dtype=np.int64)
        free = np.flatnonzero(~bp.fixed)
        gp[free] = np.arange(free.size)
        gm = np.full(bm.grid.n_faces, -1, dtype=np.int64)
        zp = bp.grid.comp(np.arange(bp.grid.n_faces), e)[..., 0].ravel()
        zm = bm.grid.comp(np.arange(bm.grid.n_faces), e)[..., -1].ravel()
        gm[zm] = gp[zp]
        rest = ~bm.fixed
        rest[zm] = False
        rest = np.flatnonzero(rest)
        gm[rest] = free.size + np.arange(rest.size)
        self.gidx = {"+": gp, "-": gm}
        self.sigma_faces = {"+": zp, "-": zm}
        nv = self.nv = int(free.size + rest.size)
        self.R = {s: _restriction(self.gidx[s], nv) for s in SIDES}

        # elastic blocks
        self.hat = TensorSpace("hat", N, h)
        self.herm = TensorSpace("hermite", N, h) if gamma == 3 else None
        nh = self.hat.size
        if self.freeze:
            self.segments = {}
        elif gamma == 1:
            A = elas.membrane()
            if A is None or np.isnan(A).any():
                raise MissingCoefficient("gamma=1 needs the in-plane block of A*")
            self.K_A = vector_stiffness(self.hat, np.asarray(A))
            self.segments = {"w_hat": e * nh, "w3": self.m}
        else:
            if elas.a is None or elas.b is None or elas.c is None:
                raise MissingCoefficient("gamma=3 needs the plate tensors a*, b*, c*")
            self.Kuu, self.Kuz, self.Kzz = plate_matrices(self.herm, self.hat, elas.a, elas.b, elas.c)
            self.segments = {"w3": self.herm.size, "u1": e * nh}
        self.offsets = {}
        off = nv
        for k, n in self.segments.items():
            self.offsets[k] = off
            off += n
        self.ny = off
        self.np_ = {s: self.boxes[s].grid.n_cells for s in SIDES}

        # bulk operators in global numbering
        self.Mv = sum(self.R[s] @ self.boxes[s].mass for s in SIDES)
        self.Av = sum(self.R[s] @ self.boxes[s].A @ self.R[s].T for s in SIDES).tocsr()
        Bv = sp.vstack([self.boxes[s].B @ self.R[s].T for s in SIDES], format="csr")
        self.B = sp.hstack([Bv, sp.csr_matrix((Bv.shape[0], self.ny - nv))], format="csr")
        self.interface = InterfaceOperator(d, interface_gram(coeffs), self._trace_map(), h ** e)
        self._factors = {}

    # -- layout helpers ----------------------------------------------------
    def _trace_map(self):
        d, e, N, nz, m = self.dim, self.dim - 1, self.N, self.nz, self.m
        qs = np.indices(N).reshape(e, -1)
        q = np.arange(m)
        R, C, V = [], [], []

        def put(rows, cols, vals):
            ok = cols >= 0
            R.append(rows[ok])
            C.append(cols[ok])
            V.append(np.broadcast_to(vals, rows.shape)[ok])

        for s, base, zslot, zface in (("+", d, 0, 0), ("-", 2 * d, nz + 1, nz)):
            g, grid = self.gidx[s], self.boxes[s].grid
            for k in range(e):
                for off in (0, 1):
                    idx = [qs[j] + off if j == k else qs[j] + 1 for j in range(e)] + [np.full(m, zslot)]
                    put(q * 3 * d + base + k, g[grid.face_index(k, idx)], 0.5)
            idx = [qs[j] + 1 for j in range(e)] + [np.full(m, zface)]
            put(q * 3 * d + base + e, g[grid.face_index(e, idx)], 1.0)
        if "w_hat" in self.segments:
            Ec = self.hat.centre_eval().tocoo()
            for k in range(e):
                put(Ec.row * 3 * d + k, self.offsets["w_hat"] + k * self.hat.size + Ec.col, Ec.data)
            put(q * 3 * d + e, self.offsets["w3"] + q, 1.0)
        elif "w3" in self.segments:
            Eh = self.herm.centre_eval().tocoo()
            put(Eh.row * 3 * d + e, self.offsets["w3"] + Eh.col, Eh.data)
        return sp.csr_matrix((np.concatenate(V), (np.concatenate(R), np.concatenate(C))),
                             shape=(3 * d * m, self.ny))

    def seg(self, y, name):
        o = self.offsets[name]
        return y[o:o + self.segments[name]]

    def box_velocity(self, state, side):
        """Full face vector of ``Omega^side`` (fixed faces are 0)."""
        return self.R[side].T @ state.y[: self.nv]

    def box_pressure(self, state, side):
        n = self.np_["+"]
        return state.p[:n] if side == "+" else state.p[n:]

    def sigma_slot_map(self):
        """``T``: in-plane Q1 coefficients -> tangential slot values on Sigma (both sides)."""
        e, N = self.dim - 1, self.N
        R, C, V = [], [], []
        node = [np.eye(n + 1, n - 1, k=-1) for n in N]  # node i -> dof i-1
        cen = [a.eval_matrix(0.5) for a in self.hat.axes]
        for s, zslot in (("+", 0), ("-", self.nz + 1)):
            g, grid = self.gidx[s], self.boxes[s].grid
            for k in range(e):
                mats = [node[j] if j == k else cen[j] for j in range(e)]
                Mk = mats[0]
                for mj in mats[1:]:
                    Mk = np.kron(Mk, mj)
                shape = tuple(N[j] + 1 if j == k else N[j] for j in range(e))
                lat = np.indices(shape).reshape(e, -1)
                idx = [lat[j] if j == k else lat[j] + 1 for j in range(e)] + [np.full(lat.shape[1], zslot)]
                rows = g[grid.face_index(k, idx)]
                rr, cc = np.nonzero(Mk)
                ok = rows[rr] >= 0
                R.append(rows[rr][ok])
                C.append(k * self.hat.size + cc[ok])
                V.append(Mk[rr, cc][ok])
        return sp.csr_matrix((np.concatenate(V), (np.concatenate(R), np.concatenate(C))),
                             shape=(self.nv, e * self.hat.size))

    # -- state ---------------------------------------------------------------
    def zero_state(self):
        u = {}
        if not self.freeze:
            if self.gamma == 1:
                u = {"u_hat": np.zeros(self.segments["w_hat"]), "u3": np.zeros(self.m)}
            else:
                u = {"u3": np.zeros(self.segments["w3"]), "u1": np.zeros(self.segments["u1"])}
        return MacroState(0.0, np.zeros(self.ny), np.zeros(sum(self.np_.values())), u)

    def random_state(self, seed=0, scale=1.0):
        """Admissible random data: discretely divergence-free ``v``, random
        displacement, and (gamma=3) ``u_1`` in in-plane equilibrium."""
        rng = np.random.default_rng(seed)
        st = self.zero_state()
        Av = self.Av + sp.diags(self.Mv)
        Bv = self.B[:, : self.nv]
        fac = SaddleFactor(Av, -Bv, pressure_mass=np.full(Bv.shape[0], self.h ** self.dim))
        r = rng.standard_normal(self.nv) * scale
        v, _, _ = fac.solve(Av @ r, np.zeros(Bv.shape[0]), tol=1e-10)
        st.y[: self.nv] = v
        if self.freeze:
            return st
        if self.gamma == 1:
            st.u["u_hat"] = rng.standard_normal(st.u["u_hat"].size) * scale * self.h
            st.u["u3"] = rng.standard_normal(self.m) * scale
        else:
            st.u["u3"] = rng.standard_normal(st.u["u3"].size) * scale * self.h
            st.u["u1"] = self._u1_equilibrium(st.u["u3"])
            st.y[self.offsets["u1"]:][: st.u["u1"].size] = st.u["u1"]
        return st

    def _u1_equilibrium(self, u3):
        from scipy.sparse.linalg import spsolve

        rhs = -(self.Kuz.T @ u3)
        if not np.any(rhs):
            return np.zeros(self.Kzz.shape[0])
        return spsolve(self.Kzz.tocsc(), rhs)

    # -- energies ----------------------------------------------------------
    def kinetic_energy(self, state):
        v = state.y[: self.nv]
        return 0.5 * float(v @ (self.Mv * v))

    def elastic_energy(self, state):
        if self.freeze:
            return 0.0
        if self.gamma == 1:
            u = state.u["u_hat"]
            return 0.5 * float(u @ (self.K_A @ u))
        u, z = state.u["u3"], state.u["u1"]
        return 0.5 * float(u @ (self.Kuu @ u) + 2 * u @ (self.Kuz @ z) + z @ (self.Kzz @ z))

    def energy(self, state):
        return self.kinetic_energy(state) + self.elastic_energy(state)

    # -- stepping ----------------------------------------------------------
    def _elastic_block(self, dt):
        nv, ny = self.nv, self.ny
        blocks = [[None, None], [None, None]]
        if self.freeze:
            return sp.csr_matrix((ny, ny))
        if self.gamma == 1:
            z = sp.csr_matrix((self.m, self.m))
            E = sp.block_diag([dt * self.K_A, z], format="csr")
        else:
            blocks = [[dt * self.Kuu, self.Kuz], [self.Kuz.T, self.Kzz / dt]]
            E = sp.bmat(blocks, format="csr")
        return sp.block_diag([sp.csr_matrix((nv, nv)), E], format="csr")

    def factor(self, dt):
        key = float(dt)
        if key not in self._factors:
            Mpad = np.concatenate([self.Mv, np.zeros(self.ny - self.nv)])
            Apad = sp.block_diag([self.Av, sp.csr_matrix((self.ny - self.nv,) * 2)], format="csr")
            A = sp.diags(Mpad / dt) + Apad + self.interface.matrix + self._elastic_block(dt)
            pm = np.full(self.B.shape[0], self.h ** self.dim)
            self._factors[key] = SaddleFactor(A.tocsr(), -self.B, pressure_mass=pm)
        return self._factors[key]

    def forcing_vector(self, forcing, t):
        if forcing is None:
            return np.zeros(self.nv)
        out = np.zeros(self.nv)
        for s in SIDES:
            box = self.boxes[s]
            f = forcing.sample(box, s, t)
            out += self.R[s] @ (box.mass * f)
        return out

    def step(self, state, forcing=None, dt=None, tol=1e-10, energy_ref=None):
        """One implicit Euler step; returns the new state (``info`` holds solver stats)."""
        if dt is None or not dt > 0:
            raise ValueError("dt must be positive")
        t1 = state.t + dt
        F = self.forcing_vector(forcing, t1)
        v0 = state.y[: self.nv]
        rhs = np.zeros(self.ny)
        rhs[: self.nv] = self.Mv * v0 / dt + F
        if not self.freeze:
            if self.gamma == 1:
                rhs[self.offsets["w_hat"]:][: self.segments["w_hat"]] = -(self.K_A @ state.u["u_hat"])
            else:
                u = state.u["u3"]
                rhs[self.offsets["w3"]:][: u.size] = -(self.Kuu @ u)
                rhs[self.offsets["u1"]:][: self.segments["u1"]] = -(self.Kuz.T @ u) / dt
        y, p, stats = self.factor(dt).solve(rhs, np.zeros(self.B.shape[0]), tol=tol)
        new = MacroState(t1, y, p, {}, state.step + 1)
        if not self.freeze:
            if self.gamma == 1:
                new.u = {"u_hat": state.u["u_hat"] + dt * self.seg(y, "w_hat"),
                         "u3": state.u["u3"] + dt * self.seg(y, "w3")}
            else:
                new.u = {"u3": state.u["u3"] + dt * self.seg(y, "w3"), "u1": self.seg(y, "u1").copy()}
        v1 = y[: self.nv]
        r_bulk = self.Mv * (v1 - v0) / dt + self.Av @ v1 - self.B[:, : self.nv].T @ p - F
        new.info = {"solver": stats.as_dict(), "dt": float(dt)}
        if not self.freeze and self.gamma == 1:
            T = self.sigma_slot_map()
            lhs = self.K_A @ new.u["u_hat"]
            scale = max(np.abs(lhs).max(initial=0.0), np.abs(T.T @ np.abs(r_bulk)).max(initial=0.0), 1e-300)
            new.info["membrane_identity"] = float(np.abs(lhs + T.T @ r_bulk).max(initial=0.0) / scale)
        if energy_ref is not None:
            E = self.energy(new)
            if E > BLOWUP_FACTOR * max(energy_ref, 1e-300):
                raise BlowUp(f"energy {E:.3e} exceeds {BLOWUP_FACTOR:.0e} x initial {energy_ref:.3e}")
        return new


def assemble_macro(domain, coeffs, elas, gamma, freeze_displacement=False):
    """Build the implicit-Euler step factory for the coupled problem."""
    return MacroProblem(domain, coeffs, elas, gamma, freeze_displacement)


def step(problem, state, forcing=None, dt=None, tol=1e-10):
    return problem.step(state, forcing, dt, tol)


# ---------------------------------------------------------------- diagnostics

def _normal(side, d):
    n = np.zeros(d)
    n[-1] = -1.0 if side == "+" else 1.0
    return n


def interface_residuals(problem: MacroProblem, state: MacroState):
    """Jump laws on Sigma evaluated from the discrete stresses.

    Stresses are taken in the first cell (normal) or on the Sigma edge layer
    (tangential), so residuals are O(h); the algebraic relations (F_1 and the
    out-of-plane ODE) use the solver's own traces and hold to solver
    precision.
    """
    P, c = problem, problem.coeffs
    d, e, h, N = P.dim, P.dim - 1, P.h, P.N
    X = P.interface.traces(state.y)
    w, vp, vm = X[:, 0], X[:, 1], X[:, 2]
    V = {"+": vp, "-": vm}
    nu = {s: _normal(s, d) for s in SIDES}
    lat = (slice(1, -1),) * e
    vb = {s: P.box_velocity(state, s) for s in SIDES}
    pb = {s: P.box_pressure(state, s).reshape(N + (P.nz,)) for s in SIDES}
    vz = {s: P.boxes[s].grid.comp(vb[s], e)[lat] for s in SIDES}
    Dp = (vz["+"][..., 1] - vz["+"][..., 0]) / h
    Dm = (vz["-"][..., -1] - vz["-"][..., -2]) / h
    jump = ((Dp - pb["+"][..., 0]) - (Dm - pb["-"][..., -1])).ravel()

    Lw = {s: w @ c.L[s].T for s in SIDES}
    Kv = {s: V[s] @ c.K[s].T for s in SIDES}
    Mv = {s: V[s] @ c.M[s].T for s in SIDES}
    Lg = np.asarray(c.L_gamma)
    cor = (w @ Lg.T)[:, e] + sum(V[s] @ c.L[s][:, e] for s in SIDES)
    F1 = Lw["+"] @ nu["+"] - Lw["-"] @ nu["-"] + Kv["+"] @ nu["+"] - Kv["-"] @ nu["-"]
    scale = max(c.scale() * max(np.abs(X).max(initial=0.0), 1e-300), 1e-300)
    out = {
        "jump_max": float(np.abs(jump).max(initial=0.0)),
        "F1_max": float(np.abs(F1).max(initial=0.0)),
        "F1_rel": float(np.abs(F1).max(initial=0.0) / scale),
        "cor610_max": float(np.abs(cor).max(initial=0.0)),
        "cor610_rel": float(np.abs(cor).max(initial=0.0) / scale),
        "trace_scale": scale,
    }
    if P.gamma == 1:
        out["normal_residual"] = out["jump_max"]
    else:
        w3 = w[:, e]
        kp = Kv["+"] @ nu["+"]
        km = Kv["-"] @ nu["-"]
        # the weak form tested with a normal test function: no identities used
        consistent = sum(Lw[s][:, e] for s in SIDES) + sum(
            (V[a] @ c.B[a + b].T)[:, e] for a in SIDES for b in SIDES)
        literal = -Lg[e, e] * w3 + kp - km
        out["normal_residual"] = float(np.abs(jump - consistent).max(initial=0.0))
        out["normal_residual_literal"] = float(np.abs(jump - literal).max(initial=0.0))
        out["K_form_gap"] = float(np.abs(consistent - (-Lg[e, e] * w3 - kp + km)).max(initial=0.0))
        out["jump_prediction_max"] = float(np.abs(consistent).max(initial=0.0))

    # tangential laws on the Sigma edge layer
    tres = 0.0
    for s, zi, sgn in (("+", 0, 1.0), ("-", -1, -1.0)):
        other = "-" if s == "+" else "+"
        samples = P.boxes[s].op.unflatten(P.boxes[s].op.apply(vb[s]))
        rhs = Lw[s] + Kv[s] + Mv[other]
        for t in range(e):
            arr = samples[(t, e)][..., zi]  # edge lattice on Sigma
            lo = [slice(None)] * e
            hi = [slice(None)] * e
            lo[t], hi[t] = slice(0, -1), slice(1, None)
            Dt3 = 0.5 * (arr[tuple(lo)] + arr[tuple(hi)])
            r = sgn * Dt3.ravel() - rhs[:, t]
            if np.isfinite(r).any():
                tres = max(tres, float(np.nanmax(np.abs(r))))
    out["tangential_residual"] = tres
    return out


def sigma_fluxes(problem: MacroProblem, state: MacroState):
    """Volume flux through Sigma, measured three ways.

    ``sigma_flux`` uses the shared normal faces (positive = out of Omega^+);
    ``out_of_plus`` and ``into_minus`` come from each box's divergence balance
    and far-wall outflow only.
    """
    P = problem
    e, hs, vol = P.dim - 1, P.h ** (P.dim - 1), P.h ** P.dim
    lat = (slice(1, -1),) * e
    vz = {s: P.boxes[s].grid.comp(P.box_velocity(state, s), e)[lat] for s in SIDES}
    div = {s: P.boxes[s].B @ P.box_velocity(state, s) for s in SIDES}
    sigma = -hs * vz["+"][..., 0].sum()
    out_plus = div["+"].sum() - hs * vz["+"][..., -1].sum()
    into_minus = -hs * vz["-"][..., 0].sum() - div["-"].sum()
    _ = vol
    return {
        "sigma_flux": float(sigma),
        "out_of_plus": float(out_plus),
        "into_minus": float(into_minus),
        "flux_balance": float(abs(out_plus - into_minus)),
        "normal_continuity": float(np.abs(vz["+"][..., 0] - vz["-"][..., -1]).max(initial=0.0)),
        "max_divergence": float(max(np.abs(div[s]).max(initial=0.0) for s in SIDES) / vol),
    }


def diagnostics(problem, state):
    out = {"t": state.t, "step": state.step, "kinetic": problem.kinetic_energy(state),
           "elastic": problem.elastic_energy(state)}
    out["energy"] = out["kinetic"] + out["elastic"]
    out.update(sigma_fluxes(problem, state))
    out.update(interface_residuals(problem, state))
    if not problem.freeze:
        if problem.gamma == 1:
            out["u3_max"] = float(np.abs(state.u["u3"]).max(initial=0.0))
            out["u_hat_max"] = float(np.abs(state.u["u_hat"]).max(initial=0.0))
        else:
            defl = problem.herm.centre_eval() @ state.u["u3"]
            out["deflection_max"] = float(np.abs(defl).max(initial=0.0))
            out["deflection_centre"] = float(defl[problem.m // 2]) if defl.size else 0.0
            out["u1_max"] = float(np.abs(state.u["u1"]).max(initial=0.0))
    for k in ("membrane_identity",):
        if k in state.info:
            out[k] = state.info[k]
    if "solver" in state.info:
        out["solver_residual"] = state.info["solver"]["residual"]
    return out


# ---------------------------------------------------------------- forcing

_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div)


def compile_expression(text, dim):
    """Compile an expression over ``+ - * /``, ``sin cos exp``, numbers, ``pi``,
    the coordinates (``x, z`` in 2D; ``x, y, z`` in 3D) and ``t``."""
    names = {"t", "pi", "x", "z"} | ({"y"} if dim == 3 else set())
    try:
        tree = ast.parse(str(text), mode="eval")
    except SyntaxError as err:
        raise ConfigError(f"bad forcing expression {text!r}: {err.msg}") from None
    for node in ast.walk(tree):
        if isinstance(node, (ast.Expression, ast.Load)) or isinstance(node, _BINOPS):
            continue
        if isinstance(node, ast.BinOp) and isinstance(node.op, _BINOPS):
            continue
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            continue
        if isinstance(node, (ast.USub, ast.UAdd)):
            continue
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            continue
        if isinstance(node, ast.Name) and (node.id in names or node.id in _FUNCS):
            continue
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS \
                and len(node.args) == 1 and not node.keywords:
            continue
        raise ConfigError(f"forcing expression {text!r}: '{ast.dump(node)[:40]}' is not allowed")
    code = compile(tree, "<forcing>", "eval")

    def fn(coords, t):
        env = dict(_FUNCS)
        env["pi"] = math.pi
        env["t"] = t
        env["x"] = coords[0]
        env["z"] = coords[-1]
        if dim == 3:
            env["y"] = coords[1]
        return eval(code, {"__builtins__": {}}, env)  # noqa: S307 -- whitelisted AST

    return fn


class Forcing:
    """Body forces per side: expression strings (or callables ``f(coords, t)``),
    active on ``[t_on, t_off)``."""

    def __init__(self, dim, plus=None, minus=None, t_on=0.0, t_off=math.inf):
        self.dim = dim
        self.t_on, self.t_off = float(t_on), float(t_off)
        self.funcs = {}
        self.text = {}
        for s, comps in (("+", plus), ("-", minus)):
            if comps is None:
                comps = ["0"] * dim
            if len(comps) != dim:
                raise ConfigError(f"forcing for side {s} needs {dim} components")
            self.text[s] = [c if isinstance(c, str) else None for c in comps]
            self.funcs[s] = [compile_expression(c, dim) if isinstance(c, (str, int, float)) else c
                             for c in comps]

    @property
    def is_zero(self):
        return all(t is not None and _is_zero_text(t) for s in SIDES for t in self.text[s])

    def sample(self, box, side, t):
        if not (self.t_on <= t < self.t_off):
            return np.zeros(box.grid.n_faces)
        fs = self.funcs[side]
        return box.sample(lambda k, X: np.asarray(fs[k](X, t), dtype=float))

    @classmethod
    def from_config(cls, dim, cfg):
        cfg = dict(cfg or {})
        return cls(dim, cfg.get("plus"), cfg.get("minus"), cfg.get("t_on", 0.0), cfg.get("t_off", math.inf))


def _is_zero_text(t):
    try:
        return float(str(t)) == 0.0
    except ValueError:
        return False


# ---------------------------------------------------------------- transient driver

@dataclass
class Trajectory:
    states: list
    diagnostics: list

    def column(self, key):
        return np.array([d.get(key, np.nan) for d in self.diagnostics])


def solve_transient(problem, forcing, T, dt, initial=None, snapshot_every=0, tol=1e-10,
                    diagnose=True):
    """March ``[0, T]``; states are kept at step 0, every ``snapshot_every`` steps and at the end."""
    state = initial.copy() if initial is not None else problem.zero_state()
    nsteps = int(round(T / dt))
    if nsteps < 1 or abs(nsteps * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError("T must be a positive multiple of dt")
    zero = forcing is None or forcing.is_zero
    e0 = problem.energy(state)
    ref = e0 if zero and e0 > 0 else None
    states = [state.copy()]
    diags = [diagnostics(problem, state)] if diagnose else []
    for n in range(1, nsteps + 1):
        state = problem.step(state, forcing, dt, tol=tol, energy_ref=ref)
        state.t = n * dt
        if diagnose:
            diags.append(diagnostics(problem, state))
        if (snapshot_every and n % snapshot_every == 0) or n == nsteps:
            states.append(state.copy())
    return Trajectory(states, diags)


CSV_COLUMNS = ("step", "t", "energy", "kinetic", "elastic", "sigma_flux", "out_of_plus", "into_minus",
               "flux_balance", "normal_continuity", "max_divergence", "jump_max", "normal_residual",
               "normal_residual_literal", "F1_rel", "cor610_rel", "tangential_residual",
               "membrane_identity", "u3_max", "u_hat_max", "deflection_max", "deflection_centre",
               "u1_max", "solver_residual")


def write_trajectory_csv(path, traj):
    cols = [c for c in CSV_COLUMNS if any(c in d for d in traj.diagnostics)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for d in traj.diagnostics:
            wr.writerow([repr(float(d[c])) if c in d else "" for c in cols])
    return cols


# ---------------------------------------------------------------- manufactured solution

def mms_velocity(X, k):
    """Divergence-free field from the stream function ``sin^2(pi x) sin^2(pi z)``."""
    x, z = X[0], X[-1]
    pi = np.pi
    if k == 0:
        return pi * np.sin(pi * x) ** 2 * np.sin(2 * pi * z)
    return -pi * np.sin(2 * pi * x) * np.sin(pi * z) ** 2


def mms_pressure(X):
    return np.cos(np.pi * X[0]) * np.cos(np.pi * X[-1])


def mms_stokes_rhs(X, k):
    """``-div D(v) + grad p = -1/2 lap v + grad p`` for the fields above."""
    x, z = X[0], X[-1]
    pi = np.pi
    if k == 0:
        lap = pi * (2 * pi**2 * np.cos(2 * pi * x) * np.sin(2 * pi * z)
                    - 4 * pi**2 * np.sin(pi * x) ** 2 * np.sin(2 * pi * z))
        dp = -pi * np.sin(pi * x) * np.cos(pi * z)
    else:
        lap = -pi * (-4 * pi**2 * np.sin(2 * pi * x) * np.sin(pi * z) ** 2
                     + 2 * pi**2 * np.sin(2 * pi * x) * np.cos(2 * pi * z))
        dp = -pi * np.cos(pi * x) * np.sin(pi * z)
    return -0.5 * lap + dp


_TIME = {
    "linear": (lambda t: t, lambda t: 1.0),
    "quadratic": (lambda t: t * t, lambda t: 2.0 * t),
}


def solve_manufactured(n, dt, T, time_law="linear", tol=1e-11):
    """Bulk Stokes on the no-slip unit square with ``v = g(t) v_s``, ``p = g(t) p_s``.

    Returns ``(error, v_h, box)``: ``error`` is the discrete L^2 velocity
    error at ``T`` in the lumped face mass.  With ``time_law='linear'``
    implicit Euler has no truncation error in time, so the error is purely
    spatial.
    """
    g, dg = _TIME[time_law]
    h = 1.0 / n
    walls = {(j, s): "dirichlet" for j in range(2) for s in (0, 1)}
    box = BulkBox((n, n), h, (0.0, 0.0), walls)
    free = np.flatnonzero(~box.fixed)
    R = sp.csr_matrix((np.ones(free.size), (np.arange(free.size), free)), shape=(free.size, box.grid.n_faces))
    M = R @ box.mass
    A = (R @ box.A @ R.T).tocsr()
    B = (box.B @ R.T).tocsr()
    ncell = box.grid.n_cells
    K = sp.diags(M / dt) + A
    fac = SaddleFactor(K, -B, pressure_kernel=np.ones(ncell), pressure_weights=np.full(ncell, h * h),
                       pressure_mass=np.full(ncell, h * h))
    vs = box.sample(lambda k, X: mms_velocity(X, k))
    fs = box.sample(lambda k, X: mms_stokes_rhs(X, k))
    v = np.zeros(free.size)
    steps = int(round(T / dt))
    for i in range(1, steps + 1):
        t = i * dt
        f = dg(t) * vs + g(t) * fs
        v, _, _ = fac.solve(M * v / dt + R @ (box.mass * f), np.zeros(ncell), tol=tol)
    err = R @ (g(steps * dt) * vs) - v
    return float(np.sqrt(err @ (M * err))), v, box
