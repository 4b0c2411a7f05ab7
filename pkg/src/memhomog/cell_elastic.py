"""Elasticity cell problems on the solid part and the effective tensors.

The correctors ``chi_ij`` solve the periodic traction-free problem with
constant prestrain ``M_ij``; the bending correctors ``chi^B_ij`` use the
prestrain ``-y_3 M_ij``.  Both are multilinear vertex fields on the solid
voxels with zero mean over the solid.  Indices are zero-based and ``dim-1``
is the vertical axis.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import geometry as geo
from . import kernels
from .errors import AdmissibilityError, FormatError, IncompleteSet, ShapeError, SingularSystem
from .grid import Q1Mesh
from .linsolve import SPDFactor

log = logging.getLogger(__name__)


def unit_strain(d, i, j):
    M = np.zeros((d, d))
    M[i, j] += 0.5
    M[j, i] += 0.5
    return M


# ---------------------------------------------------------------- micro tensor

def _voigt_pairs(d):
    if d == 3:
        return [(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)]
    return [(0, 0), (1, 1), (0, 1)]


@dataclass
class MicroElasticTensor:
    """Fourth-order tensor ``A`` on the solid, constant or one per solid voxel.

    ``C`` has shape ``(d, d, d, d)`` or ``(n_solid, d, d, d, d)`` (solid
    voxels in C order).
    """

    dim: int
    C: np.ndarray

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=float)
        d = self.dim
        if self.C.shape[-4:] != (d, d, d, d) or self.C.ndim not in (4, 5):
            raise ShapeError(f"elasticity tensor must end in shape {(d,) * 4}")

    @property
    def per_voxel(self):
        return self.C.ndim == 5

    @classmethod
    def isotropic(cls, dim, lam, mu):
        I = np.eye(dim)
        C = (lam * np.einsum("ij,kl->ijkl", I, I)
             + mu * (np.einsum("ik,jl->ijkl", I, I) + np.einsum("il,jk->ijkl", I, I)))
        return cls(dim, C)

    @classmethod
    def from_voigt(cls, dim, table):
        """Symmetric Voigt matrix (6x6 in 3D, 3x3 in 2D), or the full ``d^4`` table."""
        t = np.asarray(table, dtype=float)
        d = dim
        if t.size == d ** 4:
            return cls(d, t.reshape((d,) * 4))
        pairs = _voigt_pairs(d)
        n = len(pairs)
        if t.ndim == 1 and t.size == n * (n + 1) // 2:
            full = np.zeros((n, n))
            full[np.triu_indices(n)] = t
            t = full + np.triu(full, 1).T
        if t.shape != (n, n):
            raise ShapeError(f"Voigt table must be {n}x{n}, its upper triangle, or {d ** 4} entries")
        if not np.allclose(t, t.T, rtol=0, atol=1e-12 * max(1.0, np.abs(t).max())):
            raise FormatError("Voigt table is not symmetric")
        C = np.zeros((d,) * 4)
        for I, (i, j) in enumerate(pairs):
            for J, (k, l) in enumerate(pairs):
                for a, b in {(i, j), (j, i)}:
                    for c, e in {(k, l), (l, k)}:
                        C[a, b, c, e] = t[I, J]
        return cls(d, C)

    @classmethod
    def from_file(cls, path, dim):
        """Per-voxel table: little-endian float64, ``d^4`` entries per solid voxel."""
        raw = np.fromfile(path, dtype="<f8")
        if raw.size % dim ** 4:
            raise FormatError("per-voxel tensor file size is not a multiple of d^4")
        return cls(dim, raw.reshape((-1,) + (dim,) * 4))

    def matrix(self):
        d = self.dim
        return self.C.reshape(self.C.shape[:-4] + (d * d, d * d))

    def symmetry_defect(self):
        C = self.C
        ax = C.ndim - 4
        perm = lambda p: tuple(range(ax)) + tuple(ax + q for q in p)  # noqa: E731
        m1 = np.abs(C - np.transpose(C, perm((1, 0, 3, 2)))).max()  # A_ijkl = A_jilk
        m2 = np.abs(C - np.transpose(C, perm((2, 3, 0, 1)))).max()  # A_ijkl = A_klij
        return float(max(m1, m2))

    def coercivity(self, rng=None, probes=64):
        """Smallest ``A B : B / |B|^2`` over random symmetric probes (all voxels)."""
        rng = np.random.default_rng(0) if rng is None else rng
        d = self.dim
        mats = self.matrix().reshape(-1, d * d, d * d)
        worst = np.inf
        for _ in range(probes):
            B = rng.standard_normal((d, d))
            B = 0.5 * (B + B.T)
            v = B.reshape(-1)
            q = np.einsum("i,nij,j->n", v, mats, v) / (v @ v)
            worst = min(worst, float(q.min()))
        return worst

    def validate(self, tol=1e-10):
        scale = max(1.0, float(np.abs(self.C).max()))
        if self.symmetry_defect() > tol * scale:
            raise ValueError("elasticity tensor violates the minor/major symmetries")
        c0 = self.coercivity()
        if c0 <= 0:
            raise ValueError("elasticity tensor is not coercive on symmetric matrices")
        return c0

    def reduce_to_2d(self):
        """Restrict a 3D tensor to the (first lateral, vertical) plane."""
        if self.dim != 3:
            raise ShapeError("reduce_to_2d needs a 3D tensor")
        ix = np.ix_([0, 2], [0, 2], [0, 2], [0, 2])
        C = self.C[(Ellipsis,) + ix] if self.per_voxel else self.C[ix]
        return MicroElasticTensor(2, C)


# ---------------------------------------------------------------- system

class ElasticCellSystem:
    """Stiffness matrix, loads and kernel for one geometry and tensor."""

    def __init__(self, geom, tensor: MicroElasticTensor):
        report = geo.check_admissibility(geom, warn=False)
        if report:
            raise AdmissibilityError(report)
        if tensor.dim != geom.dim:
            raise ShapeError("tensor and geometry dimensions differ")
        self.geom, self.tensor = geom, tensor
        d = self.dim = geom.dim
        self.mesh = Q1Mesh(geom.shape, geom.h, geom.periodic, geom.solid,
                           origin=(0.0,) * (d - 1) + (-1.0,))
        m = self.mesh
        C = tensor.matrix()
        if tensor.per_voxel and C.shape[0] != m.n_elements:
            raise ShapeError("per-voxel tensor count does not match the solid voxels")
        self.C = C
        B = m.B  # (ng, d*d, nde)
        w = m.gauss_weights
        if tensor.per_voxel:
            ke = np.einsum("g,gsa,est,gtb->eab", w, B, C, B)
        else:
            ke = np.einsum("g,gsa,st,gtb->ab", w, B, C, B)[None]
        self.ndof = m.n_vertices * d
        r, c, v = kernels.q1_scatter(m.conn, ke, d)
        self.K = sp.csr_matrix((v, (r, c)), shape=(self.ndof, self.ndof))
        self.K.sum_duplicates()
        self.weights = np.repeat(m.lumped_volume(), d)
        self.kernel, self.rotation_planes = self._rigid_kernel()
        self._factor = None
        self.solid_volume = float(geom.solid.sum()) * geom.cell_volume

    @property
    def factor(self):
        if self._factor is None:
            self._factor = SPDFactor(self.K, self.kernel, self.weights)
        return self._factor

    def _rigid_kernel(self):
        """Translations plus the rotations compatible with the periodic wrap."""
        m, d, g = self.mesh, self.dim, self.geom
        shifts, wraps = kernels.unwrap_shifts(g.solid, g.periodic)
        # unwrapped lattice position of every element corner
        eshift = shifts[tuple(m.elements.T)]  # (ne, d)
        pos = (m.elements[:, None, :] + m.corners[None, :, :] + eshift[:, None, :] * np.array(g.shape))
        pos = pos.reshape(-1, d).astype(float)
        vid = m.conn.reshape(-1)
        lo = np.full((m.n_vertices, d), np.inf)
        hi = np.full((m.n_vertices, d), -np.inf)
        np.minimum.at(lo, vid, pos)
        np.maximum.at(hi, vid, pos)
        inconsistent = (hi - lo).max(axis=0) > 0.5
        bad = wraps | inconsistent
        X = lo * g.h + m.origin
        cols = []
        for k in range(d):
            t = np.zeros((m.n_vertices, d))
            t[:, k] = 1.0
            cols.append(t.reshape(-1))
        planes = []
        for a, b in itertools.combinations(range(d), 2):
            if bad[a] or bad[b]:
                continue
            r = np.zeros((m.n_vertices, d))
            r[:, a] = -X[:, b]
            r[:, b] = X[:, a]
            cols.append(r.reshape(-1))
            planes.append((a, b))
        return np.column_stack(cols), planes

    def load(self, prestrain):
        """``-int B^T A P`` for a prestrain given per Gauss point ``(ne, ng, d, d)`` or constant."""
        m, d = self.mesh, self.dim
        P = np.asarray(prestrain, dtype=float)
        if P.shape == (d, d):
            P = np.broadcast_to(P, (m.n_elements, len(m.gauss_weights), d, d))
        Pv = P.reshape(m.n_elements, -1, d * d)
        if self.tensor.per_voxel:
            S = np.einsum("est,egt->egs", self.C, Pv)
        else:
            S = np.einsum("st,egt->egs", self.C, Pv)
        fe = np.einsum("g,gsa,egs->ea", m.gauss_weights, m.B, S)
        f = np.zeros(self.ndof)
        np.add.at(f, m.element_dofs().reshape(-1), fe.reshape(-1))
        return -f

    def prestrain(self, kind, i, j):
        d = self.dim
        M = unit_strain(d, i, j)
        if kind == "chi":
            return M
        if kind == "chiB":
            y3 = self.mesh.gauss_coords()[..., d - 1]  # (ne, ng)
            return -y3[..., None, None] * M
        raise ValueError(f"unknown corrector kind '{kind}'")

    def solve(self, kind, i, j, tol=1e-10):
        P = self.prestrain(kind, i, j)
        x, stats = self.factor.solve(self.load(P), tol)
        return x.reshape(-1, self.dim), P, stats

    def energy(self, P1, x1, P2, x2):
        """``int_{Z_s} A (D x1 + P1) : (D x2 + P2)``."""
        e1 = self._total_strain(x1, P1)
        e2 = self._total_strain(x2, P2)
        return float(np.einsum("g,egs,egs->", self.mesh.gauss_weights, self._stress(e1), e2))

    def stress_average(self, P, x):
        """``int_{Z_s} A (D x + P)`` as a ``(d, d)`` array."""
        e = self._total_strain(x, P)
        s = np.einsum("g,egs->s", self.mesh.gauss_weights, self._stress(e))
        return s.reshape(self.dim, self.dim)

    def _total_strain(self, x, P):
        m, d = self.mesh, self.dim
        eps = m.strains(x).reshape(m.n_elements, -1, d * d)
        P = np.asarray(P, dtype=float)
        if P.shape == (d, d):
            return eps + P.reshape(-1)
        return eps + P.reshape(m.n_elements, -1, d * d)

    def _stress(self, e):
        if self.tensor.per_voxel:
            return np.einsum("est,egt->egs", self.C, e)
        return np.einsum("st,egt->egs", self.C, e)


# ---------------------------------------------------------------- solutions and tensors

def pairs(dim, which="all"):
    n = dim if which == "all" else dim - 1
    return [(i, j) for i in range(n) for j in range(i, n)]


@dataclass
class ElasticCellSolutionSet:
    system: ElasticCellSystem
    chi: dict = field(default_factory=dict)  # (i, j) -> (n_vertices, d)
    chiB: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.system.dim

    def get(self, kind, i, j):
        key = (min(i, j), max(i, j))
        store = self.chi if kind == "chi" else self.chiB
        if key not in store:
            raise IncompleteSet(f"{kind}{key} was not solved")
        return store[key]


def solve_cell_chi(geom, tensor, i, j, system=None, tol=1e-10):
    system = system or ElasticCellSystem(geom, tensor)
    return system.solve("chi", i, j, tol)[0]


def solve_cell_chiB(geom, tensor, i, j, system=None, tol=1e-10):
    system = system or ElasticCellSystem(geom, tensor)
    return system.solve("chiB", i, j, tol)[0]


def solve_elastic_cells(geom, tensor, bending=True, which="all", tol=1e-10):
    """Correctors for all index pairs (``which='all'``) or in-plane pairs only."""
    system = ElasticCellSystem(geom, tensor)
    sols = ElasticCellSolutionSet(system)
    for i, j in pairs(geom.dim, which):
        x, _, st = system.solve("chi", i, j, tol)
        sols.chi[(i, j)] = x
        sols.stats[f"chi{i}{j}"] = st.as_dict()
    if bending:
        for i, j in pairs(geom.dim, "inplane"):
            x, _, st = system.solve("chiB", i, j, tol)
            sols.chiB[(i, j)] = x
            sols.stats[f"chiB{i}{j}"] = st.as_dict()
    sols.stats["kernel_rotations"] = [list(p) for p in system.rotation_planes]
    return sols


@dataclass
class ElasticEffectiveTensors:
    dim: int
    A_star: np.ndarray  # (d, d, d, d); entries for unsolved pairs are NaN
    a: np.ndarray = None  # (d-1,)*4
    b: np.ndarray = None
    c: np.ndarray = None
    solid_volume: float = 1.0

    def as_dict(self):
        out = {"dim": self.dim, "solid_volume": self.solid_volume,
               "A_star": np.where(np.isnan(self.A_star), None, self.A_star).tolist()}
        for k in ("a", "b", "c"):
            v = getattr(self, k)
            out[k] = None if v is None else v.tolist()
        return out

    @classmethod
    def from_dict(cls, data):
        arr = lambda v: None if v is None else np.array(v, dtype=float)  # noqa: E731
        A = np.array([[[[np.nan if x is None else x for x in r3] for r3 in r2] for r2 in r1] for r1 in data["A_star"]])
        return cls(int(data["dim"]), A, arr(data.get("a")), arr(data.get("b")), arr(data.get("c")),
                   float(data.get("solid_volume", 1.0)))

    def membrane(self):
        """In-plane block of ``A*`` as ``(d-1,)*4``."""
        n = self.dim - 1
        return self.A_star[:n, :n, :n, :n]

    def reduce_to_2d(self):
        """Keep the first lateral index only (3D tensors to the reduced 2D mode)."""
        if self.dim != 3:
            raise ShapeError("reduce_to_2d needs 3D tensors")
        ix4 = np.ix_([0, 2], [0, 2], [0, 2], [0, 2])
        cut = lambda t: None if t is None else t[:1, :1, :1, :1].copy()  # noqa: E731
        return ElasticEffectiveTensors(2, self.A_star[ix4].copy(), cut(self.a), cut(self.b), cut(self.c),
                                       self.solid_volume)

    @classmethod
    def zeros(cls, dim):
        n = dim - 1
        return cls(dim, np.zeros((dim,) * 4), np.zeros((n,) * 4), np.zeros((n,) * 4), np.zeros((n,) * 4))


def assemble_Astar(sols, form="energy"):
    """``A*_ijkl``; ``form`` is ``'energy'`` or ``'stress'``.

    Pairs without a corrector are left as NaN.
    """
    s = sols.system
    d = sols.dim
    A = np.full((d,) * 4, np.nan)
    avail = set(sols.chi)
    for (k, l) in avail:
        Pkl = unit_strain(d, k, l)
        xkl = sols.chi[(k, l)]
        if form == "stress":
            S = s.stress_average(Pkl, xkl)
            for i in range(d):
                for j in range(d):
                    for a, b in {(k, l), (l, k)}:
                        A[i, j, a, b] = S[i, j]
        elif form == "energy":
            for (i, j) in avail:
                e = s.energy(Pkl, xkl, unit_strain(d, i, j), sols.chi[(i, j)])
                for p, q in {(i, j), (j, i)}:
                    for a, b in {(k, l), (l, k)}:
                        A[p, q, a, b] = e
        else:
            raise ValueError("form must be 'energy' or 'stress'")
    n = d - 1
    if np.isnan(A[:n, :n, :n, :n]).any():
        raise IncompleteSet("in-plane correctors are missing")
    return A


def assemble_plate_tensors(sols):
    """``(a*, b*, c*)`` with the ``1/|Z_s|`` normalisation.

    ``b*`` carries the bending pair first: ``b*_{abgd}`` pairs ``chi^B_ab``
    with ``chi_gd``, so the cross energy reads ``Q : b* E`` with ``Q`` the
    curvature and ``E`` the in-plane strain.
    """
    s = sols.system
    d = sols.dim
    n = d - 1
    a = np.zeros((n,) * 4)
    b = np.zeros((n,) * 4)
    c = np.zeros((n,) * 4)
    pr = pairs(d, "inplane")
    for p in pr:
        for q in pr:
            Pm_p = unit_strain(d, *p)
            Pm_q = unit_strain(d, *q)
            Pb_p = s.prestrain("chiB", *p)
            Pb_q = s.prestrain("chiB", *q)
            va = s.energy(Pm_p, sols.get("chi", *p), Pm_q, sols.get("chi", *q))
            vb = s.energy(Pb_p, sols.get("chiB", *p), Pm_q, sols.get("chi", *q))
            vc = s.energy(Pb_p, sols.get("chiB", *p), Pb_q, sols.get("chiB", *q))
            for i, j in {p, p[::-1]}:
                for k, l in {q, q[::-1]}:
                    a[i, j, k, l] = va
                    b[i, j, k, l] = vb
                    c[i, j, k, l] = vc
    V = s.solid_volume
    return a / V, b / V, c / V


def effective_tensors(sols, form="energy"):
    A = assemble_Astar(sols, form)
    out = ElasticEffectiveTensors(sols.dim, A, solid_volume=sols.system.solid_volume)
    if sols.chiB:
        out.a, out.b, out.c = assemble_plate_tensors(sols)
    return out


# ---------------------------------------------------------------- reconstruction

def _strain_samples(E, n, name):
    E = np.asarray(E, dtype=float)
    if E.shape == (n, n):
        E = E[None]
    if E.ndim != 3 or E.shape[1:] != (n, n):
        raise ShapeError(f"{name} must have shape ({n}, {n}) or (m, {n}, {n})")
    return E


def reconstruct_u1(strain, sols):
    """``u_1 = sum_{ij} E_ij chi_ij`` per Sigma sample, shape ``(m, n_vertices, d)``."""
    n = sols.dim - 1
    E = _strain_samples(strain, n, "strain")
    out = np.zeros((len(E), sols.system.mesh.n_vertices, sols.dim))
    for i in range(n):
        for j in range(n):
            out += E[:, i, j, None, None] * sols.get("chi", i, j)[None]
    return out


def reconstruct_u2(strain, hessian, sols):
    """``u_2 = sum_{ij} (E_ij chi_ij + H_ij chi^B_ij)``."""
    n = sols.dim - 1
    E = _strain_samples(strain, n, "strain")
    H = _strain_samples(hessian, n, "hessian")
    if len(E) != len(H) and 1 not in (len(E), len(H)):
        raise ShapeError("sample counts differ")
    out = reconstruct_u1(E, sols)
    for i in range(n):
        for j in range(n):
            out = out + H[:, i, j, None, None] * sols.get("chiB", i, j)[None]
    return out


def tensor_document(tens, geom, stats, tol):
    return {
        "kind": "elastic_effective_tensors",
        "geometry": geo.phase_fields(geom),
        "tolerance": tol,
        "tensors": tens.as_dict(),
        "solver": json.loads(json.dumps(stats, sort_keys=True)),
    }
