"""Discrete operators on structured boxes.

Two layouts live here:

* :class:`MacGrid` -- staggered (MAC) velocity/pressure layout used by every
  Stokes solve.  Each axis is either periodic or bounded by walls.  Velocity
  component ``k`` lives on ``k``-faces; along a bounded axis ``j != k`` it
  carries two extra *wall slots* (index ``0`` and ``N_j + 1``) holding the
  tangential trace on the wall, so the layout along that axis reads
  ``[wall, cell 0, ..., cell N-1, wall]``.
* :class:`Q1Mesh` -- vertex-based bilinear/trilinear elements on an active
  subset of voxels, used for the elasticity cell problems.

Full face vectors are the concatenation of all components, each raveled in
C order.  Ordering of samples, faces and cells is fixed and documented in
``README.md``; every routine here is deterministic.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import LayoutError


class MacGrid:
    """Staggered grid on ``origin + [0, N_0 h] x ... x [0, N_{d-1} h]``."""

    def __init__(self, shape, h, periodic, origin=None):
        self.shape = tuple(int(n) for n in shape)
        self.dim = len(self.shape)
        self.h = float(h)
        self.periodic = tuple(bool(p) for p in periodic)
        if len(self.periodic) != self.dim:
            raise ValueError("one periodic flag per axis")
        self.origin = np.zeros(self.dim) if origin is None else np.asarray(origin, dtype=float)
        self.comp_shapes = [self._comp_shape(k) for k in range(self.dim)]
        sizes = [int(np.prod(s)) for s in self.comp_shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.n_faces = int(self.offsets[-1])
        self.n_cells = int(np.prod(self.shape))
        self.cell_volume = self.h ** self.dim

    # -- layout -----------------------------------------------------------
    def _comp_shape(self, k):
        out = []
        for j, n in enumerate(self.shape):
            if self.periodic[j]:
                out.append(n)
            elif j == k:
                out.append(n + 1)
            else:
                out.append(n + 2)
        return tuple(out)

    def tidx(self, j, c):
        """Index along axis ``j`` of a tangential component for cell index ``c``."""
        if self.periodic[j]:
            return np.mod(c, self.shape[j])
        return c + 1

    def face_index(self, k, idx):
        """Flat index into the full face vector for component ``k``."""
        return self.offsets[k] + np.ravel_multi_index(tuple(idx), self.comp_shapes[k])

    def comp(self, vec, k):
        """View of component ``k`` of a full face vector, shaped as its layout."""
        return vec[self.offsets[k]:self.offsets[k + 1]].reshape(self.comp_shapes[k])

    def axis_positions(self, k, j):
        """Coordinates along axis ``j`` of the faces of component ``k``."""
        n, h, o = self.shape[j], self.h, self.origin[j]
        if j == k:
            m = n if self.periodic[j] else n + 1
            return o + np.arange(m) * h
        if self.periodic[j]:
            return o + (np.arange(n) + 0.5) * h
        return np.concatenate([[o], o + (np.arange(n) + 0.5) * h, [o + n * h]])

    def face_coords(self, k):
        out = []
        for j in range(self.dim):
            x = self.axis_positions(k, j)
            shp = [1] * self.dim
            shp[j] = x.size
            out.append(x.reshape(shp))
        return out

    def cell_coords(self):
        out = []
        for j in range(self.dim):
            x = self.origin[j] + (np.arange(self.shape[j]) + 0.5) * self.h
            shp = [1] * self.dim
            shp[j] = x.size
            out.append(x.reshape(shp))
        return out

    def slot_count(self, k):
        """Number of bounded tangential axes along which a face is a wall slot."""
        cnt = np.zeros(self.comp_shapes[k], dtype=np.int8)
        for j in range(self.dim):
            if j == k or self.periodic[j]:
                continue
            m = self.comp_shapes[k][j]
            shp = [1] * self.dim
            shp[j] = m
            line = np.zeros(m, dtype=np.int8)
            line[0] = line[-1] = 1
            cnt = cnt + line.reshape(shp)
        return cnt

    def is_slot(self, k):
        return self.slot_count(k) > 0

    def used(self, k):
        """Faces that enter some stencil.

        Slots on two walls at once, and wall-normal faces that are also a slot
        of another axis, sit on box corners and are never referenced.
        """
        cnt = self.slot_count(k)
        return (cnt == 0) | ((cnt == 1) & ~self.wall_normal(k))

    def wall_normal(self, k):
        """Normal faces of component ``k`` lying on a wall of axis ``k``."""
        out = np.zeros(self.comp_shapes[k], dtype=bool)
        if not self.periodic[k]:
            sl = [slice(None)] * self.dim
            sl[k] = 0
            out[tuple(sl)] = True
            sl[k] = -1
            out[tuple(sl)] = True
        return out

    def full(self, per_comp):
        """Concatenate per-component arrays into a full face vector."""
        return np.concatenate([np.asarray(a, dtype=float).reshape(-1) for a in per_comp])

    def sample_field(self, fn):
        """Evaluate ``fn(k, coords)`` at the faces of each component."""
        parts = []
        for k in range(self.dim):
            c = self.face_coords(k)
            parts.append(np.broadcast_to(fn(k, c), self.comp_shapes[k]))
        return self.full(parts)

    def affine_field(self, E, c=None):
        """Face samples of ``y -> E y + c``."""
        E = np.asarray(E, dtype=float)
        c = np.zeros(self.dim) if c is None else np.asarray(c, dtype=float)

        def fn(k, X):
            v = c[k]
            for j in range(self.dim):
                v = v + E[k, j] * X[j]
            return v

        return self.sample_field(fn)

    # -- operators ---------------------------------------------------------
    def divergence_matrix(self):
        """Cell-centred divergence, shape ``(n_cells, n_faces)``."""
        d, h = self.dim, self.h
        cells = np.indices(self.shape).reshape(d, -1)
        rows = np.arange(self.n_cells)
        R, C, V = [], [], []
        for k in range(d):
            for side, sgn in ((0, -1.0), (1, 1.0)):
                idx = []
                for j in range(d):
                    if j == k:
                        f = cells[j] + side
                        if self.periodic[j]:
                            f = np.mod(f, self.shape[j])
                        idx.append(f)
                    else:
                        idx.append(self.tidx(j, cells[j]))
                R.append(rows)
                C.append(self.face_index(k, idx))
                V.append(np.full(rows.size, sgn / h))
        return sp.csr_matrix(
            (np.concatenate(V), (np.concatenate(R), np.concatenate(C))),
            shape=(self.n_cells, self.n_faces),
        )

    def gradient_matrix(self):
        """Face-centred pressure gradient (zero on wall faces and slots).

        On faces between two cells this equals ``-Div^T``, so that
        ``<grad p, v> + <p, div v>`` reduces to wall terms.
        """
        Dt = -self.divergence_matrix().T.tocsr()
        keep = np.zeros(self.n_faces)
        for k in range(self.dim):
            m = (~self.wall_normal(k)) & (~self.is_slot(k))
            keep[self.offsets[k]:self.offsets[k + 1]] = m.reshape(-1)
        return sp.diags(keep) @ Dt

    def face_mass(self, inside=None):
        """Lumped mass: control volume of each face inside the box (slots: 0)."""
        out = []
        for k in range(self.dim):
            m = np.full(self.comp_shapes[k], self.cell_volume)
            m[self.wall_normal(k)] *= 0.5
            m[self.is_slot(k)] = 0.0
            out.append(m)
        return self.full(out)


# ---------------------------------------------------------------- strain operator

@dataclass
class SampleBlock:
    kind: str  # "diag" or "edge"
    axes: tuple
    shape: tuple  # lattice shape of the block (edges: before corner removal)
    start: int
    size: int
    index: np.ndarray = None  # lattice multi-indices of the samples, (d, size)


class StrainOperator:
    """Symmetric gradient sampled on the MAC layout.

    ``D_kk`` is sampled at cell centres, ``D_jk`` (``j < k``) at the edges
    where ``j``- and ``k``-faces meet.  A difference uses spacing ``h``, or
    ``h/2`` when exactly one of its two face values is a wall slot or a face
    buried in the solid; such values stand for the trace on the wall or on
    ``Gamma``.  Edge control volumes count the in-box cells around the edge.

    Quadratic forms ``sum_s w_s (sum_k D_kk^2 + 2 sum_{j<k} D_jk^2)`` with the
    weights from :meth:`weights` realise ``int D(u):D(v)`` on a region.
    """

    def __init__(self, grid: MacGrid, solid=None):
        self.grid = grid
        d = grid.dim
        if solid is None:
            solid = np.zeros(grid.shape, dtype=bool)
        solid = np.asarray(solid, dtype=bool)
        if solid.shape != grid.shape:
            raise LayoutError("solid mask shape does not match grid")
        self.solid = solid
        self.blocks = []
        rows, cols, vals = [], [], []
        count_in, count_solid = [], []
        start = 0

        # diagonal samples
        cells = np.indices(grid.shape).reshape(d, -1)
        for k in range(d):
            n = cells.shape[1]
            r = start + np.arange(n)
            for side, sgn in ((0, -1.0), (1, 1.0)):
                idx = [cells[j] + side if j == k else grid.tidx(j, cells[j]) for j in range(d)]
                if grid.periodic[k]:
                    idx[k] = np.mod(idx[k], grid.shape[k])
                rows.append(r)
                cols.append(grid.face_index(k, idx))
                vals.append(np.full(n, sgn / grid.h))
            count_in.append(np.full(n, 4))
            count_solid.append(4 * solid.reshape(-1).astype(int))
            self.blocks.append(SampleBlock("diag", (k,), grid.shape, start, n, cells))
            start += n

        # edge samples
        for j, k in itertools.combinations(range(d), 2):
            eshape = []
            for a in range(d):
                if a in (j, k):
                    eshape.append(grid.shape[a] if grid.periodic[a] else grid.shape[a] + 1)
                else:
                    eshape.append(grid.shape[a])
            e = np.indices(eshape).reshape(d, -1)
            corner = np.ones(e.shape[1], dtype=bool)
            for a in (j, k):
                if grid.periodic[a]:
                    corner[:] = False
                else:
                    corner &= (e[a] == 0) | (e[a] == grid.shape[a])
            e = e[:, ~corner]  # box-corner edges carry no information, see used()
            n = e.shape[1]
            r = start + np.arange(n)
            for (a, b) in ((j, k), (k, j)):
                # d/dx_a of u_b: u_b on b-faces at position e_b, neighbours along a
                lo_c, hi_c = e[a] - 1, e[a]
                vals_pair = []
                for c_a in (lo_c, hi_c):
                    idx = []
                    for ax in range(d):
                        if ax == b:
                            idx.append(np.mod(e[b], grid.shape[b]) if grid.periodic[b] else e[b])
                        elif ax == a:
                            idx.append(grid.tidx(a, c_a))
                        else:
                            idx.append(grid.tidx(ax, e[ax]))
                    special = np.zeros(n, dtype=bool)
                    if not grid.periodic[a]:
                        special |= (c_a < 0) | (c_a >= grid.shape[a])
                    special |= self._buried(b, e, a, c_a)
                    vals_pair.append((grid.face_index(b, idx), special))
                (i_lo, s_lo), (i_hi, s_hi) = vals_pair
                half = s_lo ^ s_hi
                inv = np.where(half, 2.0 / grid.h, 1.0 / grid.h) * 0.5
                rows += [r, r]
                cols += [i_hi, i_lo]
                vals += [inv, -inv]
            cin, cso = self._edge_counts(e, j, k)
            count_in.append(cin)
            count_solid.append(cso)
            self.blocks.append(SampleBlock("edge", (j, k), tuple(eshape), start, n, e))
            start += n

        self.n_samples = start
        self.G = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_samples, grid.n_faces),
        )
        self.G.sum_duplicates()
        self._count_in = np.concatenate(count_in)
        self._count_solid = np.concatenate(count_solid)
        self._mult = np.concatenate(
            [np.full(b.size, 1.0 if b.kind == "diag" else 2.0) for b in self.blocks]
        )

    def _buried(self, b, e, a, c_a):
        """True where the ``b``-face at edge position ``e`` next to cell ``c_a`` lies inside the solid."""
        g = self.grid
        d = g.dim
        if not self.solid.any():
            return np.zeros(e.shape[1], dtype=bool)
        inside = np.ones(e.shape[1], dtype=bool)
        valid_a = np.ones(e.shape[1], dtype=bool)
        if not g.periodic[a]:
            valid_a = (c_a >= 0) & (c_a < g.shape[a])
        for side in (-1, 0):
            cb = e[b] + side
            valid = valid_a.copy()
            if g.periodic[b]:
                cb = np.mod(cb, g.shape[b])
            else:
                valid &= (cb >= 0) & (cb < g.shape[b])
            idx = []
            for ax in range(d):
                if ax == b:
                    idx.append(np.clip(cb, 0, g.shape[b] - 1))
                elif ax == a:
                    ca = np.mod(c_a, g.shape[a]) if g.periodic[a] else np.clip(c_a, 0, g.shape[a] - 1)
                    idx.append(ca)
                else:
                    idx.append(e[ax])
            s = self.solid[tuple(idx)] & valid
            inside &= s
        return inside

    def _edge_counts(self, e, j, k):
        g = self.grid
        d = g.dim
        n = e.shape[1]
        cin = np.zeros(n, dtype=int)
        cso = np.zeros(n, dtype=int)
        for sj in (-1, 0):
            for sk in (-1, 0):
                valid = np.ones(n, dtype=bool)
                idx = []
                for ax in range(d):
                    if ax in (j, k):
                        c = e[ax] + (sj if ax == j else sk)
                        if g.periodic[ax]:
                            c = np.mod(c, g.shape[ax])
                        else:
                            valid &= (c >= 0) & (c < g.shape[ax])
                            c = np.clip(c, 0, g.shape[ax] - 1)
                        idx.append(c)
                    else:
                        idx.append(e[ax])
                cin += valid
                cso += valid & self.solid[tuple(idx)]
        return cin, cso

    # -- weights and application ------------------------------------------
    def weights(self, region="fluid"):
        """Quadrature weights (factor 2 on off-diagonal samples included)."""
        if region == "fluid":
            cnt = self._count_in - self._count_solid
        elif region == "solid":
            cnt = self._count_solid
        elif region == "all":
            cnt = self._count_in
        else:
            raise ValueError(f"unknown region '{region}'")
        return cnt / 4.0 * self.grid.cell_volume * self._mult

    def apply(self, vec, strain=None):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.grid.n_faces,):
            raise LayoutError(f"expected {self.grid.n_faces} face values, got {vec.shape}")
        s = self.G @ vec
        if strain is not None:
            E = np.asarray(strain, dtype=float)
            S = 0.5 * (E + E.T)
            for b in self.blocks:
                i, j = (b.axes[0], b.axes[0]) if b.kind == "diag" else b.axes
                s[b.start:b.start + b.size] += S[i, j]
        return s

    def unflatten(self, s):
        """Samples as lattice arrays keyed by ``(i, j)``; dropped corner edges are NaN."""
        out = {}
        for b in self.blocks:
            key = (b.axes[0], b.axes[0]) if b.kind == "diag" else b.axes
            arr = np.full(b.shape, np.nan)
            arr[tuple(b.index)] = s[b.start:b.start + b.size]
            out[key] = arr
        return out

    def energy_matrix(self, region="fluid"):
        W = sp.diags(self.weights(region))
        return (self.G.T @ W @ self.G).tocsr()


# ---------------------------------------------------------------- fields

@dataclass
class CellField:
    """Discrete field on a grid.

    ``kind`` is ``"velocity"`` (full MAC face vector), ``"pressure"`` (cell
    values) or ``"displacement"`` (vertex values on a :class:`Q1Mesh`,
    ``(n_vertices, dim)``).  ``strain`` is an optional constant macro strain
    so that non-periodic affine fields ``periodic part + E y`` can be stored.
    """

    kind: str
    values: np.ndarray
    grid: object
    strain: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.kind == "velocity":
            if self.values.shape != (self.grid.n_faces,):
                raise LayoutError("velocity field length does not match the face layout")
        elif self.kind == "pressure":
            if self.values.size != self.grid.n_cells:
                raise LayoutError("pressure field length does not match the cell count")
        elif self.kind == "displacement":
            if self.values.shape != (self.grid.n_vertices, self.grid.dim):
                raise LayoutError("displacement field shape does not match the vertex layout")
        else:
            raise LayoutError(f"unknown field kind '{self.kind}'")


def sym_gradient(field, op=None):
    """Samples of ``D(u)``.

    Velocity fields return a dict ``{(i, j): array}`` of MAC samples;
    displacement fields return ``(n_elements, n_gauss, d, d)`` Gauss-point
    strains.
    """
    if field.kind == "velocity":
        op = op or StrainOperator(field.grid)
        if op.grid is not field.grid:
            raise LayoutError("operator and field live on different grids")
        return op.unflatten(op.apply(field.values, field.strain))
    if field.kind == "displacement":
        eps = field.grid.strains(field.values)
        if field.strain is not None:
            E = np.asarray(field.strain, dtype=float)
            eps = eps + 0.5 * (E + E.T)
        return eps
    raise LayoutError("sym_gradient needs a velocity or displacement field")


def divergence(field):
    if field.kind != "velocity":
        raise LayoutError("divergence needs a velocity field")
    g = field.grid
    div = g.divergence_matrix() @ field.values
    if field.strain is not None:
        div = div + np.trace(np.asarray(field.strain, dtype=float))
    return div.reshape(g.shape)


def inner_product_D(f, g, region="fluid", op=None):
    """``int_region D(f):D(g)`` with the MAC quadrature."""
    if f.kind != "velocity" or g.kind != "velocity":
        raise LayoutError("inner_product_D needs velocity fields")
    if f.grid is not g.grid:
        raise LayoutError("fields live on different grids")
    op = op or StrainOperator(f.grid)
    w = op.weights(region)
    return float(op.apply(f.values, f.strain) @ (w * op.apply(g.values, g.strain)))


# ---------------------------------------------------------------- Q1 mesh

_GP = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


class Q1Mesh:
    """Multilinear elements on the active voxels of a structured grid.

    Vertices along a periodic axis are identified modulo ``N``.  Only
    vertices touched by an active element are numbered; ``n_vertices``
    counts them and ``vertex_ids`` maps the full vertex lattice to them
    (``-1`` when unused).
    """

    def __init__(self, shape, h, periodic, active, origin=None):
        self.shape = tuple(int(n) for n in shape)
        self.dim = d = len(self.shape)
        self.h = float(h)
        self.periodic = tuple(bool(p) for p in periodic)
        self.origin = np.zeros(d) if origin is None else np.asarray(origin, dtype=float)
        active = np.asarray(active, dtype=bool)
        if active.shape != self.shape:
            raise LayoutError("active mask shape does not match grid")
        self.active = active
        self.vshape = tuple(n if p else n + 1 for n, p in zip(self.shape, self.periodic))
        self.elements = np.argwhere(active)  # (ne, d) in C order
        self.corners = np.array(list(itertools.product((0, 1), repeat=d)))  # (2^d, d)
        full = []
        for c in self.corners:
            v = self.elements + c
            for ax in range(d):
                if self.periodic[ax]:
                    v[:, ax] = np.mod(v[:, ax], self.shape[ax])
            full.append(np.ravel_multi_index(tuple(v.T), self.vshape))
        full = np.stack(full, axis=1) if len(self.elements) else np.zeros((0, 2 ** d), dtype=np.int64)
        used = np.unique(full)
        self.vertex_ids = np.full(int(np.prod(self.vshape)), -1, dtype=np.int64)
        self.vertex_ids[used] = np.arange(used.size)
        self.used_vertices = used
        self.conn = self.vertex_ids[full]
        self.n_vertices = int(used.size)
        self.n_elements = int(len(self.elements))
        self._gauss = np.array(list(itertools.product(_GP, repeat=d)))
        self._gw = np.full(len(self._gauss), self.h ** d / 2 ** d)
        self._B = np.stack([self._bmatrix(x) for x in self._gauss])  # (ng, d*d, nde)
        self._Bc = self._bmatrix(np.full(d, 0.5))

    @property
    def gauss_points(self):
        return self._gauss

    @property
    def gauss_weights(self):
        return self._gw

    def shape_functions(self, xi):
        xi = np.asarray(xi, dtype=float)
        N = np.ones(len(self.corners))
        dN = np.ones((len(self.corners), self.dim))
        for a, c in enumerate(self.corners):
            for ax in range(self.dim):
                f = xi[ax] if c[ax] else 1.0 - xi[ax]
                N[a] *= f
            for g in range(self.dim):
                val = 1.0
                for ax in range(self.dim):
                    if ax == g:
                        val *= (1.0 if c[ax] else -1.0) / self.h
                    else:
                        val *= xi[ax] if c[ax] else 1.0 - xi[ax]
                dN[a, g] = val
        return N, dN

    def _bmatrix(self, xi):
        d = self.dim
        _, dN = self.shape_functions(xi)
        nde = len(self.corners) * d
        B = np.zeros((d * d, nde))
        for a in range(len(self.corners)):
            for i in range(d):
                for j in range(d):
                    # eps_ij = 0.5 (du_i/dx_j + du_j/dx_i)
                    B[i * d + j, a * d + i] += 0.5 * dN[a, j]
                    B[i * d + j, a * d + j] += 0.5 * dN[a, i]
        return B

    @property
    def B(self):
        """Strain-displacement matrices at the Gauss points, ``(ng, d*d, nde)``."""
        return self._B

    def element_dofs(self):
        d = self.dim
        return (self.conn[:, :, None] * d + np.arange(d)).reshape(self.n_elements, -1)

    def gauss_coords(self):
        """Physical Gauss-point coordinates ``(ne, ng, d)`` (no periodic unwrapping)."""
        base = self.origin + self.elements * self.h
        return base[:, None, :] + self._gauss[None, :, :] * self.h

    def strains(self, values, points="gauss"):
        u = np.asarray(values, dtype=float).reshape(-1)[self.element_dofs()]  # (ne, nde)
        B = self._B if points == "gauss" else self._Bc[None]
        eps = np.einsum("gsn,en->egs", B, u)
        return eps.reshape(self.n_elements, B.shape[0], self.dim, self.dim)

    def lumped_volume(self):
        w = np.zeros(self.n_vertices)
        np.add.at(w, self.conn.reshape(-1), self.h ** self.dim / 2 ** self.dim)
        return w

    def vertex_lattice_index(self):
        """Lattice multi-index ``(n_vertices, d)`` of each numbered vertex."""
        return np.array(np.unravel_index(self.used_vertices, self.vshape)).T


# ---------------------------------------------------------------- export

def export_vtk(path, grid: MacGrid, cell_data: dict):
    """Legacy VTK structured-points file with cell data.

    Scalars are given as cell arrays; a full face vector under the key
    ``velocity`` is averaged to cell centres and written as a vector.
    Cells are written in x-fastest order as the format requires.
    """
    d = grid.dim
    dims = [n + 1 for n in grid.shape] + [1] * (3 - d)
    spacing = [grid.h] * d + [1.0] * (3 - d)
    origin = list(grid.origin) + [0.0] * (3 - d)
    lines = [
        "# vtk DataFile Version 3.0",
        "memhomog field export",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        "DIMENSIONS " + " ".join(str(v) for v in dims),
        "ORIGIN " + " ".join(repr(float(v)) for v in origin),
        "SPACING " + " ".join(repr(float(v)) for v in spacing),
        f"CELL_DATA {grid.n_cells}",
    ]
    for name, arr in cell_data.items():
        arr = np.asarray(arr, dtype=float)
        if name == "velocity":
            vc = cell_average_velocity(grid, arr)
            vt = np.transpose(vc.reshape(grid.shape + (d,)), list(range(d - 1, -1, -1)) + [d])
            vt = vt.reshape(-1, d)
            if d == 2:
                vt = np.column_stack([vt, np.zeros(len(vt))])
            lines.append(f"VECTORS {name} double")
            lines += [" ".join(repr(float(x)) for x in row) for row in vt]
        else:
            a = arr.reshape(grid.shape).transpose(list(range(d - 1, -1, -1))).reshape(-1)
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines += [repr(float(x)) for x in a]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def cell_average_velocity(grid: MacGrid, vec):
    d = grid.dim
    cells = np.indices(grid.shape).reshape(d, -1)
    out = np.zeros((grid.n_cells, d))
    for k in range(d):
        acc = 0.0
        for side in (0, 1):
            idx = []
            for j in range(d):
                if j == k:
                    f = cells[j] + side
                    idx.append(np.mod(f, grid.shape[j]) if grid.periodic[j] else f)
                else:
                    idx.append(grid.tidx(j, cells[j]))
            acc = acc + vec[grid.face_index(k, idx)]
        out[:, k] = 0.5 * acc
    return out


def export_csv(path, values):
    """``index,value`` rows in storage order."""
    values = np.asarray(values, dtype=float).reshape(-1)
    with open(path, "w") as fh:
        fh.write("index,value\n")
        for i, v in enumerate(values):
            fh.write(f"{i},{float(v)!r}\n")
