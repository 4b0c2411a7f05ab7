"""Stokes cell problems on the fluid part of the reference cell.

Index convention: directions are zero-based, ``dim - 1`` is the vertical
axis (the "3" of the three-dimensional theory).  The solution set holds

* ``gamma[i]``  -- velocity ``e_i`` on Gamma, ``0`` on the top and bottom;
* ``plus[i]``, ``minus[i]`` (tangential ``i``) -- ``e_i`` on the top
  (resp. bottom) wall only;
* ``q3`` -- ``e_3`` on both walls, ``0`` on Gamma.  ``q3/2`` plays the role
  of the vertical ``plus``/``minus`` member.

All problems share one matrix; it is factorised once.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import geometry as geo
from .errors import AdmissibilityError, IncompleteSet, LayoutError, ShapeError
from .grid import MacGrid, StrainOperator
from .linsolve import SaddleFactor

log = logging.getLogger(__name__)

SIDES = ("+", "-")


# ---------------------------------------------------------------- system

class StokesCellSystem:
    """Discrete cell Stokes operator for one geometry.

    Unknowns are the faces between two fluid voxels.  Faces touching the
    solid carry the Gamma data, wall slots and wall-normal faces carry the
    top/bottom data.  Continuity is imposed on every fluid voxel.
    """

    def __init__(self, geom, method="auto"):
        report = geo.check_admissibility(geom, warn=False)
        if report:
            raise AdmissibilityError(report)
        self.geom = geom
        d = geom.dim
        self.dim = d
        self.grid = MacGrid(geom.shape, geom.h, geom.periodic, origin=(0.0,) * (d - 1) + (-1.0,))
        self.op = StrainOperator(self.grid, geom.solid)
        g = self.grid
        unknown, gamma = [], []
        for k in range(d):
            touch = self._touches_solid(k)
            free = (~g.wall_normal(k)) & (~g.is_slot(k))
            unknown.append(free & ~touch)
            gamma.append(touch)
        self.unknown = g.full(unknown).astype(bool)
        self.gamma_faces = g.full(gamma).astype(bool)
        self.U = np.flatnonzero(self.unknown)
        self.Pidx = np.flatnonzero(~self.unknown)
        self.fluid_cells = np.flatnonzero(geom.fluid.reshape(-1))
        A = self.op.energy_matrix("fluid")
        Div = g.divergence_matrix()[self.fluid_cells]
        self.A_full = A
        self.Div = Div
        vol = g.cell_volume
        self.A_UU = A[self.U][:, self.U]
        self.A_UP = A[self.U][:, self.Pidx]
        self.B_U = -vol * Div[:, self.U]
        self.B_P = -vol * Div[:, self.Pidx]
        self._method = method
        self._factor = None

    @property
    def factor(self):
        """Saddle factorisation, built on first use."""
        if self._factor is None:
            nf = self.fluid_cells.size
            vol = self.grid.cell_volume
            self._factor = SaddleFactor(
                self.A_UU, self.B_U, pressure_kernel=np.ones((nf, 1)),
                pressure_weights=np.full(nf, vol), method=self._method,
                pressure_mass=np.full(nf, vol),
            )
        return self._factor

    def _touches_solid(self, k):
        """Faces of component ``k`` with a solid voxel on either side (along ``k``)."""
        g = self.grid
        s = self.geom.solid
        d = self.dim
        out = np.zeros(g.comp_shapes[k], dtype=bool)
        shape = g.comp_shapes[k]
        idx = np.indices(shape)
        valid = np.ones(shape, dtype=bool)
        cell = []
        for j in range(d):
            if j == k:
                cell.append(None)
            elif g.periodic[j]:
                cell.append(idx[j])
            else:
                c = idx[j] - 1
                valid &= (c >= 0) & (c < g.shape[j])
                cell.append(np.clip(c, 0, g.shape[j] - 1))
        for side in (-1, 0):
            c = idx[k] + side
            ok = valid.copy()
            if g.periodic[k]:
                c = np.mod(c, g.shape[k])
            else:
                ok &= (c >= 0) & (c < g.shape[k])
                c = np.clip(c, 0, g.shape[k] - 1)
            cc = list(cell)
            cc[k] = c
            out |= ok & s[tuple(cc)]
        return out

    # -- boundary data ------------------------------------------------------
    def data(self, kind, i):
        """Full face vector of prescribed values for one problem."""
        g, d = self.grid, self.dim
        parts = [np.zeros(s) for s in g.comp_shapes]
        if kind == "gamma":
            parts[i] = self.gamma_faces[g.offsets[i]:g.offsets[i + 1]].reshape(g.comp_shapes[i]).astype(float)
        elif kind in ("+", "-"):
            if i == d - 1:
                raise ValueError("vertical wall problem is q3")
            sl = [slice(None)] * d
            sl[d - 1] = -1 if kind == "+" else 0
            parts[i][tuple(sl)] = 1.0
        elif kind == "q3":
            sl = [slice(None)] * d
            for end in (0, -1):
                sl[d - 1] = end
                parts[d - 1][tuple(sl)] = 1.0
        else:
            raise ValueError(f"unknown cell problem '{kind}'")
        vec = g.full(parts)
        vec[self.unknown] = 0.0
        return vec

    def solve(self, data_vecs, tol=1e-10):
        """Solve for several data vectors; returns velocities, pressures, stats."""
        vs, ps, st = [], [], []
        vol = self.grid.cell_volume
        for q in data_vecs:
            qP = q[self.Pidx]
            f = -(self.A_UP @ qP)
            gg = -(self.B_P @ qP)
            u, p, stats = self.factor.solve(f, gg, tol=tol)
            full = q.copy()
            full[self.U] = u
            pc = np.zeros(self.grid.n_cells)
            pc[self.fluid_cells] = p
            div = self.Div @ full
            stats.extra["max_divergence"] = float(np.abs(div).max())
            stats.extra["pressure_mean"] = float(p.sum() * vol)
            vs.append(full)
            ps.append(pc)
            st.append(stats)
        return vs, ps, st


# ---------------------------------------------------------------- solution set

@dataclass
class StokesCellSolutionSet:
    geom: object
    system: StokesCellSystem
    gamma: list
    gamma_pi: list
    plus: list
    plus_pi: list
    minus: list
    minus_pi: list
    q3: np.ndarray
    pi3: np.ndarray
    stats: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.geom.dim

    @property
    def grid(self):
        return self.system.grid

    def velocity(self, family, i):
        """``q_i^family`` with ``family`` in ``{'gamma', '+', '-'}``; vertical +/- give ``q3/2``."""
        d = self.dim
        if family == "gamma":
            return self.gamma[i]
        if family not in SIDES:
            raise ValueError(f"unknown family '{family}'")
        if i == d - 1:
            return 0.5 * self.q3
        return (self.plus if family == "+" else self.minus)[i]

    def pressure(self, family, i):
        d = self.dim
        if family == "gamma":
            return self.gamma_pi[i]
        if i == d - 1:
            return 0.5 * self.pi3
        return (self.plus_pi if family == "+" else self.minus_pi)[i]

    def family_matrix(self):
        """Columns ``[q^Gamma_0.., q^+_0.., q^-_0..]`` as a dense ``(n_faces, 3 d)`` array."""
        d = self.dim
        cols = [self.velocity("gamma", i) for i in range(d)]
        cols += [self.velocity("+", i) for i in range(d)]
        cols += [self.velocity("-", i) for i in range(d)]
        return np.column_stack(cols)

    def completeness_residual(self):
        """``max |q_i^Gamma + q_i^+ + q_i^- - e_i|`` over the used faces, per direction."""
        g = self.grid
        used = g.full([g.used(k) for k in range(self.dim)]).astype(bool)
        out = []
        for i in range(self.dim):
            s = self.velocity("gamma", i) + self.velocity("+", i) + self.velocity("-", i)
            e = g.full([np.full(g.comp_shapes[k], 1.0 if k == i else 0.0) for k in range(self.dim)])
            out.append(float(np.abs(s - e)[used].max()))
        return out


def _solve(geom, kinds, tol, method, system=None):
    system = system or StokesCellSystem(geom, method=method)
    data = [system.data(k, i) for k, i in kinds]
    vs, ps, st = system.solve(data, tol=tol)
    return system, vs, ps, st


def solve_cell_gamma(geom, i, tol=1e-10, method="auto", system=None):
    """``(q_i^Gamma, pi_i^Gamma)`` as full face / cell vectors."""
    _check_dir(geom, i, tangential=False)
    _, vs, ps, _ = _solve(geom, [("gamma", i)], tol, method, system)
    return vs[0], ps[0]


def solve_cell_pm(geom, i, side, tol=1e-10, method="auto", system=None):
    _check_dir(geom, i, tangential=True)
    if side not in SIDES:
        raise ValueError("side must be '+' or '-'")
    _, vs, ps, _ = _solve(geom, [(side, i)], tol, method, system)
    return vs[0], ps[0]


def solve_cell_q3(geom, tol=1e-10, method="auto", system=None):
    _, vs, ps, _ = _solve(geom, [("q3", 0)], tol, method, system)
    return vs[0], ps[0]


def _check_dir(geom, i, tangential):
    top = geom.dim - 1 if tangential else geom.dim
    if not 0 <= i < top:
        raise ShapeError(f"direction {i} out of range for dim {geom.dim}")


def solve_all(geom, tol=1e-10, method="auto"):
    """All ``2 dim + 1`` cell problems with a single factorisation."""
    d = geom.dim
    system = StokesCellSystem(geom, method=method)
    kinds = [("gamma", i) for i in range(d)]
    kinds += [("+", i) for i in range(d - 1)] + [("-", i) for i in range(d - 1)] + [("q3", 0)]
    _, vs, ps, st = _solve(geom, kinds, tol, method, system)
    n = d - 1
    stats = {}
    names = [f"gamma{i}" for i in range(d)] + [f"plus{i}" for i in range(n)] + [f"minus{i}" for i in range(n)] + ["q3"]
    for name, s in zip(names, st):
        stats[name] = s.as_dict()
    return StokesCellSolutionSet(
        geom, system,
        vs[:d], ps[:d],
        vs[d:d + n], ps[d:d + n],
        vs[d + n:d + 2 * n], ps[d + n:d + 2 * n],
        vs[-1], ps[-1], stats,
    )


# ---------------------------------------------------------------- coefficients

@dataclass
class FluidInterfaceCoefficients:
    dim: int
    B: dict  # keys "++", "+-", "-+", "--"; B["ab"] is B^{a,b}
    L: dict  # keys "+", "-"
    K: dict
    M: dict
    L_gamma: np.ndarray
    gram: np.ndarray = None  # 3d x 3d Gram matrix of the family

    def as_dict(self):
        out = {"dim": self.dim, "L_gamma": _lst(self.L_gamma)}
        for name in ("B", "L", "K", "M"):
            out[name] = {k: _lst(v) for k, v in getattr(self, name).items()}
        return out

    @classmethod
    def from_dict(cls, data):
        arr = lambda v: np.asarray(v, dtype=float)  # noqa: E731
        return cls(
            int(data["dim"]),
            {k: arr(v) for k, v in data["B"].items()},
            {k: arr(v) for k, v in data["L"].items()},
            {k: arr(v) for k, v in data["K"].items()},
            {k: arr(v) for k, v in data["M"].items()},
            arr(data["L_gamma"]),
        )

    def scale(self):
        return max(np.abs(self.L_gamma).max(), max(np.abs(b).max() for b in self.B.values()))

    def replace(self, **kw):
        """Copy with some tensors swapped (fault injection, zero coupling tests)."""
        vals = {k: getattr(self, k) for k in ("dim", "B", "L", "K", "M", "L_gamma", "gram")}
        vals.update(kw)
        return FluidInterfaceCoefficients(**vals)

    @classmethod
    def zeros(cls, dim):
        z = np.zeros((dim, dim))
        return cls(dim, {k: z.copy() for k in ("++", "+-", "-+", "--")},
                   {s: z.copy() for s in SIDES}, {s: z.copy() for s in SIDES},
                   {s: z.copy() for s in SIDES}, z.copy())


def _lst(a):
    return np.asarray(a, dtype=float).tolist()


def gram_matrix(sols):
    """``S[a, b] = int_{Z_f} D(f_a):D(f_b)`` over the family of :meth:`family_matrix`."""
    F = sols.family_matrix()
    op = sols.system.op
    GF = op.G @ F
    return GF.T @ (op.weights("fluid")[:, None] * GF)


def k_from_b(Baa):
    d = Baa.shape[0]
    K = Baa.copy()
    v = d - 1
    K[:v, v] *= 2.0
    K[v, :v] *= 2.0
    K[v, v] *= 2.0
    return K


def m_from_b(Bab):
    M = Bab.copy()
    v = M.shape[0] - 1
    M[v, :] = 0.0
    M[:, v] = 0.0
    return M


def coefficients_from_gram(S, dim):
    d = dim
    blk = {"G": slice(0, d), "+": slice(d, 2 * d), "-": slice(2 * d, 3 * d)}
    L_gamma = S[blk["G"], blk["G"]].copy()
    L = {a: S[blk[a], blk["G"]].copy() for a in SIDES}
    B = {a + b: S[blk[b], blk[a]].copy() for a in SIDES for b in SIDES}
    K = {a: k_from_b(B[a + a]) for a in SIDES}
    M = {a: m_from_b(B[a + ("-" if a == "+" else "+")]) for a in SIDES}
    return FluidInterfaceCoefficients(d, B, L, K, M, L_gamma, S)


def assemble_fluid_coefficients(sols):
    if sols is None or any(v is None for v in (sols.q3, *sols.gamma, *sols.plus, *sols.minus)):
        raise IncompleteSet("cell solution set is incomplete")
    if len(sols.gamma) != sols.dim or len(sols.plus) != sols.dim - 1 or len(sols.minus) != sols.dim - 1:
        raise IncompleteSet("cell solution set is incomplete")
    return coefficients_from_gram(gram_matrix(sols), sols.dim)


# ---------------------------------------------------------------- reconstruction

def _as_samples(x, d, name):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeError(f"{name} must have shape (d,) or (m, d) with d = {d}")
    return x


def _combine(sols, dtu, vplus, vminus, getter):
    d = sols.dim
    w = _as_samples(dtu, d, "dtu")
    vp = _as_samples(vplus, d, "v+")
    vm = _as_samples(vminus, d, "v-")
    m = max(len(w), len(vp), len(vm))
    for a in (w, vp, vm):
        if len(a) not in (1, m):
            raise ShapeError("sample counts differ")
    cols = [getter("gamma", i) for i in range(d)] + [getter("+", i) for i in range(d)] + [getter("-", i) for i in range(d)]
    F = np.column_stack(cols)
    coef = np.hstack([np.broadcast_to(w, (m, d)), np.broadcast_to(vp, (m, d)), np.broadcast_to(vm, (m, d))])
    out = coef @ F.T
    return out


def reconstruct_membrane_velocity(sols, dtu, vplus, vminus):
    """Cell velocity ``sum_i dtu_i q_i^Gamma + sum_alpha sum_i v^alpha_i q_i^alpha``.

    Inputs are vectors of length ``dim`` or ``(m, dim)`` stacks, one row per
    Sigma sample; the result has one full face vector per row.
    """
    return _combine(sols, dtu, vplus, vminus, sols.velocity)


def reconstruct_membrane_pressure(sols, dtu, vplus, vminus):
    return _combine(sols, dtu, vplus, vminus, sols.pressure)


# ---------------------------------------------------------------- persistence

def cache_dir(explicit=None):
    path = explicit or os.environ.get("MEMHOMOG_CACHE")
    if not path:
        return None
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def coefficient_document(coeffs, geom, stats, tol):
    doc = {
        "kind": "fluid_interface_coefficients",
        "geometry": geo.phase_fields(geom),
        "tolerance": tol,
        "coefficients": coeffs.as_dict(),
        "solver": {k: {kk: vv for kk, vv in v.items()} for k, v in sorted(stats.items())},
    }
    return doc


def dumps(doc):
    return json.dumps(doc, sort_keys=True, indent=1)


def save_solutions(path, sols):
    arrays = {"q3": sols.q3, "pi3": sols.pi3}
    for name in ("gamma", "plus", "minus"):
        for i, v in enumerate(getattr(sols, name)):
            arrays[f"{name}{i}"] = v
            arrays[f"{name}_pi{i}"] = getattr(sols, name + "_pi")[i]
    arrays["stats"] = np.array(json.dumps(sols.stats, sort_keys=True))
    np.savez_compressed(path, **arrays)


def load_solutions(path, geom, method="auto"):
    with np.load(path) as z:
        d = geom.dim
        system = StokesCellSystem(geom, method=method)
        if z["q3"].shape != (system.grid.n_faces,):
            raise LayoutError("cached cell solutions do not match the geometry layout")
        get = lambda n, k: [z[f"{n}{i}"] for i in range(k)]  # noqa: E731
        return StokesCellSolutionSet(
            geom, system,
            get("gamma", d), get("gamma_pi", d),
            get("plus", d - 1), get("plus_pi", d - 1),
            get("minus", d - 1), get("minus_pi", d - 1),
            z["q3"], z["pi3"], json.loads(str(z["stats"])),
        )


def solve_all_cached(geom, tol=1e-10, method="auto", cache=None):
    """``solve_all`` with an on-disk cache keyed by geometry hash and tolerance.

    Returns ``(solutions, hit)``.
    """
    root = cache_dir(cache)
    if root is not None:
        path = root / f"stokes_{geom.hash[:24]}_{tol:.0e}.npz"
        if path.exists():
            log.info("cell Stokes cache hit %s", path.name)
            return load_solutions(path, geom, method), True
    sols = solve_all(geom, tol=tol, method=method)
    if root is not None:
        save_solutions(path, sols)
    return sols, False
