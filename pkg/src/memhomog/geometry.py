"""Periodic reference cell and macroscopic domain.

The cell is ``Z = (0,1)^(dim-1) x (-1,1)`` discretised by a uniform voxel
mask of shape ``(n,)*(dim-1) + (2n,)`` with ``h = 1/n``.  The vertical axis is
always the last one.  A voxel is solid when its centre lies inside the
described shape; lateral coordinates are taken modulo one so that shapes
wrap periodically.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import AdmissibilityError, FormatError, GeometryWarning

FLUID = 0
SOLID = 1

# face tags
INTERIOR = 0
GAMMA = 1
S_PLUS = 2
S_MINUS = 3
PERIODIC = 4
TAG_NAMES = {INTERIOR: "interior", GAMMA: "gamma", S_PLUS: "S+", S_MINUS: "S-", PERIODIC: "periodic"}


@dataclass(frozen=True, eq=False)
class CellGeometry:
    """Voxelised reference cell.

    ``solid`` is a boolean array, True on solid voxels.  Instances are treated
    as immutable; the mask is made read-only on construction.
    """

    dim: int
    resolution: int
    solid: np.ndarray
    descriptor: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.resolution < 4:
            raise ValueError("resolution must be at least 4")
        expect = self.shape
        if self.solid.shape != expect:
            raise FormatError(f"mask shape {self.solid.shape} does not match {expect}")
        arr = np.ascontiguousarray(self.solid, dtype=bool)
        arr.setflags(write=False)
        object.__setattr__(self, "solid", arr)

    @property
    def shape(self):
        n = self.resolution
        return (n,) * (self.dim - 1) + (2 * n,)

    @property
    def h(self):
        return 1.0 / self.resolution

    @property
    def fluid(self):
        return ~self.solid

    @property
    def cell_volume(self):
        return self.h ** self.dim

    @property
    def periodic(self):
        return (True,) * (self.dim - 1) + (False,)

    def centers(self):
        """Voxel-centre coordinates, one array per axis (broadcastable)."""
        n = self.resolution
        out = []
        for ax in range(self.dim):
            if ax < self.dim - 1:
                c = (np.arange(n) + 0.5) / n
            else:
                c = -1.0 + (np.arange(2 * n) + 0.5) / n
            shp = [1] * self.dim
            shp[ax] = c.size
            out.append(c.reshape(shp))
        return out

    @property
    def hash(self):
        return geometry_hash(self)

    def __repr__(self):
        return (
            f"CellGeometry(dim={self.dim}, resolution={self.resolution}, "
            f"solid_voxels={int(self.solid.sum())})"
        )


def geometry_hash(geom):
    """sha256 over (dim, resolution, mask bytes); independent of descriptor syntax."""
    hsh = hashlib.sha256()
    hsh.update(np.array([geom.dim, geom.resolution], dtype=np.int64).tobytes())
    hsh.update(np.packbits(geom.solid.reshape(-1)).tobytes())
    return hsh.hexdigest()


# ---------------------------------------------------------------- descriptors

def _lateral_delta(coord, center):
    d = coord - center
    return d - np.round(d)


def _shape_indicator(desc, coords, dim):
    kind = str(desc.get("shape", "")).lower()
    lat = dim - 1
    if kind in ("ball", "disc", "disk", "sphere", "circle"):
        r = float(desc["radius"])
        c = _center(desc, dim)
        r2 = 0.0
        for ax in range(dim):
            d = _lateral_delta(coords[ax], c[ax]) if ax < lat else coords[ax] - c[ax]
            r2 = r2 + d * d
        return r2 < r * r
    if kind == "cylinder":
        r = float(desc["radius"])
        axis = desc.get("axis", 0)
        axis = {"x": 0, "y": 1, "z": dim - 1, "vertical": dim - 1}.get(axis, axis)
        axis = int(axis)
        c = _center(desc, dim)
        r2 = 0.0
        for ax in range(dim):
            if ax == axis:
                continue
            d = _lateral_delta(coords[ax], c[ax]) if ax < lat else coords[ax] - c[ax]
            r2 = r2 + d * d
        inside = r2 < r * r
        if "half_length" in desc:
            d = coords[axis] - c[axis]
            if axis < lat:
                d = _lateral_delta(coords[axis], c[axis])
            inside = inside & (np.abs(d) < float(desc["half_length"]))
        return inside
    if kind == "box":
        lo = np.asarray(desc["lo"], dtype=float)
        hi = np.asarray(desc["hi"], dtype=float)
        if lo.size != dim or hi.size != dim:
            raise FormatError("box lo/hi need one entry per axis")
        inside = True
        for ax in range(dim):
            x = coords[ax]
            if ax < lat and hi[ax] - lo[ax] < 1.0:
                # wrap the lateral coordinate into [lo, lo+1)
                x = lo[ax] + np.mod(x - lo[ax], 1.0)
            inside = inside & (x > lo[ax]) & (x < hi[ax])
        return inside
    if kind == "cross":
        # two orthogonal square rods through the cell at mid-height; they
        # percolate laterally, so the solid connects across the period.
        if dim != 3:
            raise FormatError("cross geometry needs dim = 3")
        a = float(desc.get("half_width", 0.25))
        t = float(desc.get("half_thickness", a))
        c = _center(desc, dim)
        dz = np.abs(coords[2] - c[2]) < t
        rod_x = (np.abs(_lateral_delta(coords[1], c[1])) < a) & dz
        rod_y = (np.abs(_lateral_delta(coords[0], c[0])) < a) & dz
        return rod_x | rod_y
    if kind == "slab":
        lo, hi = float(desc["z_lo"]), float(desc["z_hi"])
        z = coords[dim - 1]
        return (z > lo) & (z < hi) & np.ones_like(coords[0], dtype=bool)
    if kind == "union":
        parts = desc.get("parts")
        if not parts:
            raise FormatError("union needs a non-empty 'parts' list")
        out = False
        for p in parts:
            out = out | _shape_indicator(p, coords, dim)
        return out
    raise FormatError(f"unknown shape '{kind}'")


def _center(desc, dim):
    c = desc.get("center")
    if c is None:
        return np.array([0.5] * (dim - 1) + [0.0])
    c = np.asarray(c, dtype=float)
    if c.size != dim:
        raise FormatError("center needs one entry per axis")
    return c


def voxelize(desc):
    """Turn a descriptor into a :class:`CellGeometry` without checking admissibility."""
    if not isinstance(desc, dict):
        raise FormatError("geometry descriptor must be a mapping")
    kind = str(desc.get("shape", "")).lower()
    if kind in ("mask", "mask_file", "file"):
        dim, n, solid = read_mask(desc["path"], fmt=desc.get("format"),
                                  dim=desc.get("dim"), resolution=desc.get("resolution"))
        return CellGeometry(dim, n, solid, dict(desc))
    try:
        dim = int(desc.get("dim", 3))
        n = int(desc["resolution"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"descriptor needs integer 'dim' and 'resolution': {exc}") from None
    if n < 4:
        raise ValueError("resolution must be at least 4")
    shape = (n,) * (dim - 1) + (2 * n,)
    probe = CellGeometry.__new__(CellGeometry)
    object.__setattr__(probe, "dim", dim)
    object.__setattr__(probe, "resolution", n)
    coords = CellGeometry.centers(probe)
    try:
        solid = _shape_indicator(desc, coords, dim)
    except KeyError as exc:
        raise FormatError(f"descriptor missing key {exc}") from None
    solid = np.broadcast_to(solid, shape).copy()
    return CellGeometry(dim, n, solid, dict(desc))


def build_cell_geometry(desc):
    """Voxelise ``desc`` and raise :class:`AdmissibilityError` unless it passes all checks."""
    geom = voxelize(desc)
    report = check_admissibility(geom)
    if report:
        raise AdmissibilityError(report)
    return geom


# ---------------------------------------------------------------- mask files

def read_mask(path, fmt=None, dim=None, resolution=None):
    """Read an explicit voxel mask.

    Binary: little-endian int32 header ``(dim, n0, n1, n2)`` followed by
    ``n0*n1*n2`` uint8 labels in C order (nonzero = solid).  In 2D the header
    is ``(2, n, 2n, 1)``.  CSV: rows ``i,j[,k],label`` with label 0/1 or
    fluid/solid; ``dim`` and ``resolution`` must then be given.
    """
    path = Path(path)
    if not path.exists():
        raise FormatError(f"mask file not found: {path}")
    if fmt is None:
        fmt = "csv" if path.suffix.lower() in (".csv", ".txt") else "binary"
    if fmt == "binary":
        raw = path.read_bytes()
        if len(raw) < 16:
            raise FormatError("mask file shorter than its header")
        hdr = np.frombuffer(raw[:16], dtype="<i4")
        d, n0, n1, n2 = (int(v) for v in hdr)
        if d not in (2, 3) or min(n0, n1, n2) < 1:
            raise FormatError(f"bad mask header {hdr.tolist()}")
        body = np.frombuffer(raw[16:], dtype=np.uint8)
        if body.size != n0 * n1 * n2:
            raise FormatError(f"mask body has {body.size} bytes, header says {n0 * n1 * n2}")
        if d == 2:
            if n2 != 1 or n1 != 2 * n0:
                raise FormatError("2D mask header must read (2, n, 2n, 1)")
            solid = body.reshape(n0, n1) != 0
        else:
            if not (n0 == n1 and n2 == 2 * n0):
                raise FormatError("3D mask header must read (3, n, n, 2n)")
            solid = body.reshape(n0, n1, n2) != 0
        return d, n0, solid
    if fmt == "csv":
        if dim is None or resolution is None:
            raise FormatError("CSV masks need 'dim' and 'resolution' in the descriptor")
        dim, n = int(dim), int(resolution)
        shape = (n,) * (dim - 1) + (2 * n,)
        solid = np.zeros(shape, dtype=bool)
        seen = np.zeros(shape, dtype=bool)
        text = path.read_text()
        for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            if lineno == 1 and not row[0].strip().lstrip("-").isdigit():
                continue  # header line
            if len(row) != dim + 1:
                raise FormatError(f"line {lineno}: expected {dim + 1} fields")
            try:
                idx = tuple(int(v) for v in row[:dim])
            except ValueError:
                raise FormatError(f"line {lineno}: non-integer index") from None
            lab = row[dim].strip().lower()
            if lab in ("1", "solid", "s"):
                val = True
            elif lab in ("0", "fluid", "f"):
                val = False
            else:
                raise FormatError(f"line {lineno}: unknown label '{row[dim]}'")
            if any(i < 0 or i >= s for i, s in zip(idx, shape)):
                raise FormatError(f"line {lineno}: index {idx} out of range")
            solid[idx] = val
            seen[idx] = True
        if not seen.all():
            raise FormatError(f"CSV mask leaves {int((~seen).sum())} voxels unlabelled")
        return dim, n, solid
    raise FormatError(f"unknown mask format '{fmt}'")


def write_mask(geom, path, fmt="binary"):
    path = Path(path)
    if fmt == "binary":
        n = geom.resolution
        hdr = (2, n, 2 * n, 1) if geom.dim == 2 else (3, n, n, 2 * n)
        path.write_bytes(np.array(hdr, dtype="<i4").tobytes()
                         + geom.solid.astype(np.uint8).tobytes(order="C"))
    elif fmt == "csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"i{k}" for k in range(geom.dim)] + ["label"])
            for idx in np.ndindex(geom.shape):
                w.writerow(list(idx) + [int(geom.solid[idx])])
    else:
        raise FormatError(f"unknown mask format '{fmt}'")


# ---------------------------------------------------------------- checks

def _first(mask):
    idx = np.argwhere(mask)
    return tuple(int(v) for v in idx[0])


def check_admissibility(geom, warn=True):
    """List the violated admissibility conditions (empty list when admissible).

    Each entry names the condition and the first witness voxel in C order.
    Diagonal-only solid contacts are reported as warnings, not failures.
    """
    report = []
    s = geom.solid
    top = s[..., -1]
    bot = s[..., 0]
    if top.any():
        report.append(f"solid touches S+ at voxel {_first(top) + (s.shape[-1] - 1,)}")
    if bot.any():
        report.append(f"solid touches S- at voxel {_first(bot) + (0,)}")
    if not s.any():
        report.append("solid phase is empty")
    if s.all():
        report.append("fluid phase is empty")
    for name, phase in (("solid", s), ("fluid", ~s)):
        if not phase.any():
            continue
        labels, count = kernels.label_periodic(phase, geom.periodic)
        if count > 1:
            witness = _first(labels == 1)
            report.append(f"{name} not connected ({count} components; first voxel of component 2 at {witness})")
    if warn:
        for msg in diagonal_contacts(geom):
            warnings.warn(msg, GeometryWarning, stacklevel=2)
    return report


def diagonal_contacts(geom):
    """Voxel pairs of one phase that meet only along an edge or corner (2x2 checkerboards)."""
    msgs = []
    s = geom.solid
    dim = geom.dim
    for a in range(dim):
        for b in range(a + 1, dim):
            s00 = s
            s10 = np.roll(s, -1, axis=a)
            s01 = np.roll(s, -1, axis=b)
            s11 = np.roll(np.roll(s, -1, axis=a), -1, axis=b)
            chk = ((s00 & s11 & ~s10 & ~s01) | (~s00 & ~s11 & s10 & s01))
            # no wrap along the vertical axis
            sl = [slice(None)] * dim
            sl[dim - 1] = slice(0, s.shape[dim - 1] - 1)
            chk = chk[tuple(sl)]
            if chk.any():
                msgs.append(
                    f"non-Lipschitz diagonal contact in plane ({a},{b}) at voxel {_first(chk)}"
                )
    return msgs


# ---------------------------------------------------------------- tags and measures

def face_tags(geom):
    """Per-axis arrays of face tags.

    Lateral axis ``k``: shape equals the cell shape, entry ``i`` along ``k`` is
    the face between voxels ``i-1`` and ``i`` (periodic; ``i=0`` is the wrap
    face).  Vertical axis: ``2n+1`` faces, ``0`` is S- and ``2n`` is S+.
    """
    s = geom.solid
    dim = geom.dim
    tags = []
    for ax in range(dim - 1):
        prev = np.roll(s, 1, axis=ax)
        t = np.full(s.shape, INTERIOR, dtype=np.int8)
        sl = [slice(None)] * dim
        sl[ax] = 0
        t[tuple(sl)] = PERIODIC
        t[prev != s] = GAMMA
        tags.append(t)
    shp = list(s.shape)
    shp[-1] += 1
    t = np.full(shp, INTERIOR, dtype=np.int8)
    t[..., 1:-1][s[..., 1:] != s[..., :-1]] = GAMMA
    t[..., 0] = S_MINUS
    t[..., -1] = S_PLUS
    tags.append(t)
    return tags


def tag_counts(geom):
    out = {}
    for t in face_tags(geom):
        vals, cnt = np.unique(t, return_counts=True)
        for v, c in zip(vals, cnt):
            out[TAG_NAMES[int(v)]] = out.get(TAG_NAMES[int(v)], 0) + int(c)
    return out


def measure_phase(geom, phase="solid"):
    """Volume, volume fraction and interface area ``|Gamma|`` in voxel measure."""
    h = geom.h
    nsolid = int(geom.solid.sum())
    vol_s = nsolid * h ** geom.dim
    total = 2.0  # |Z| = 1^(dim-1) * 2
    vol = vol_s if phase == "solid" else total - vol_s
    if phase not in ("solid", "fluid"):
        raise ValueError("phase must be 'solid' or 'fluid'")
    ngamma = sum(int((t == GAMMA).sum()) for t in face_tags(geom))
    return {
        "phase": phase,
        "volume": vol,
        "fraction": vol / total,
        "gamma_area": ngamma * h ** (geom.dim - 1),
    }


def phase_fields(geom):
    """JSON-able summary used in reports."""
    ms = measure_phase(geom, "solid")
    return {
        "dim": geom.dim,
        "resolution": geom.resolution,
        "hash": geom.hash,
        "solid_volume": ms["volume"],
        "fluid_volume": 2.0 - ms["volume"],
        "gamma_area": ms["gamma_area"],
    }


# ---------------------------------------------------------------- macro domain

@dataclass(frozen=True)
class MacroDomain:
    """``Omega = Sigma x (-H, H)`` with ``Sigma = (a, b)`` (integer corners)."""

    dim: int
    a: tuple
    b: tuple
    H: float
    mesh_resolution: int

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        a = tuple(int(v) for v in np.atleast_1d(self.a))
        b = tuple(int(v) for v in np.atleast_1d(self.b))
        if len(a) != self.dim - 1 or len(b) != self.dim - 1:
            raise ValueError("Sigma corners need dim-1 components")
        if any(lo >= hi for lo, hi in zip(a, b)):
            raise ValueError("Sigma extent needs a_i < b_i")
        if not self.H > 0:
            raise ValueError("H must be positive")
        if int(self.mesh_resolution) < 1:
            raise ValueError("mesh_resolution must be positive")
        nz = self.H * self.mesh_resolution
        if abs(nz - round(nz)) > 1e-9:
            raise ValueError("H * mesh_resolution must be an integer")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def h(self):
        return 1.0 / self.mesh_resolution

    @property
    def sigma_cells(self):
        return tuple((hi - lo) * self.mesh_resolution for lo, hi in zip(self.a, self.b))

    @property
    def nz(self):
        return int(round(self.H * self.mesh_resolution))

    def boundary_partition(self):
        """Counts of boundary faces of ``Omega^+`` and ``Omega^-`` by part.

        Every boundary face lies in exactly one of the Neumann (top/bottom),
        Dirichlet (lateral) and interface parts; ``total`` counts all faces
        of the two closed boxes.
        """
        sig = int(np.prod(self.sigma_cells))
        lateral = 0
        for ax, nc in enumerate(self.sigma_cells):
            lateral += 2 * (sig // nc) * self.nz
        per_box = 2 * sig + lateral
        return {
            "neumann": 2 * sig,
            "dirichlet": 2 * lateral,
            "interface": 2 * sig,  # Sigma seen from both sides
            "total": 2 * per_box,
        }


def descriptor_from_json(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"descriptor is not valid JSON: {exc}") from None
