"""Independent oracles: brute-force integrals, identity suites, refinement studies.

The brute-force routines walk the voxels one at a time with their own index
arithmetic and never call the sparse operators they check, so agreement
with the assembled tensors tests the assembly, not just the summation order.
"""

from __future__ import annotations

import itertools
import json
import math
import re
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import cell_elastic as ce
from . import cell_stokes as cs
from . import geometry as geo
from .errors import NonMonotoneWarning, UnknownDefinition

FLUID_DEFS = ("gram", "L_gamma", "L+", "L-", "B++", "B+-", "B-+", "B--", "K+", "K-", "M+", "M-")
ELASTIC_DEFS = ("A_star", "a", "b", "c")


# ---------------------------------------------------------------- loop stencils

class LoopStrain:
    """Per-sample symmetric-gradient stencil written with scalar index loops.

    Mirrors the sampling rules of the MAC layout (centre samples for the
    diagonal, edge samples for the off-diagonal, half spacing next to a wall
    slot or a buried face, box-corner edges skipped) without touching
    :class:`memhomog.grid.StrainOperator`.
    """

    def __init__(self, grid, solid=None):
        self.g = g = grid
        d = g.dim
        self.solid = np.zeros(g.shape, dtype=bool) if solid is None else np.asarray(solid, dtype=bool)
        self.samples = []  # (terms [(idx, coef)], weight_all, weight_fluid, mult)
        vol, h = g.cell_volume, g.h
        for k in range(d):
            for c in itertools.product(*[range(n) for n in g.shape]):
                lo = self._face(k, [c[j] if j == k else self._t(j, c[j]) for j in range(d)])
                hi = self._face(k, [self._wrap(k, c[k] + 1) if j == k else self._t(j, c[j]) for j in range(d)])
                wf = 0.0 if self.solid[c] else vol
                self.samples.append(([(hi, 1.0 / h), (lo, -1.0 / h)], vol, wf, 1.0))
        for j, k in itertools.combinations(range(d), 2):
            ranges = []
            for a in range(d):
                if a in (j, k):
                    ranges.append(range(g.shape[a] if g.periodic[a] else g.shape[a] + 1))
                else:
                    ranges.append(range(g.shape[a]))
            for e in itertools.product(*ranges):
                if all((not g.periodic[a]) and e[a] in (0, g.shape[a]) for a in (j, k)):
                    continue
                terms = []
                for a, b in ((j, k), (k, j)):
                    vals = []
                    for ca in (e[a] - 1, e[a]):
                        idx = []
                        for ax in range(d):
                            if ax == b:
                                idx.append(self._wrap(b, e[b]))
                            elif ax == a:
                                idx.append(self._t(a, ca))
                            else:
                                idx.append(self._t(ax, e[ax]))
                        out = (not g.periodic[a]) and not (0 <= ca < g.shape[a])
                        special = out or self._buried(b, e, a, ca)
                        vals.append((self._face(b, idx), special))
                    (ilo, slo), (ihi, shi) = vals
                    sp_ = h / 2 if slo != shi else h
                    terms += [(ihi, 0.5 / sp_), (ilo, -0.5 / sp_)]
                cin = cso = 0
                for sj in (-1, 0):
                    for sk in (-1, 0):
                        cell = list(e)
                        ok = True
                        for ax, s in ((j, sj), (k, sk)):
                            cc = e[ax] + s
                            if g.periodic[ax]:
                                cc %= g.shape[ax]
                            elif not 0 <= cc < g.shape[ax]:
                                ok = False
                            cell[ax] = cc
                        if ok:
                            cin += 1
                            cso += int(self.solid[tuple(cell)])
                self.samples.append((terms, cin / 4 * vol, (cin - cso) / 4 * vol, 2.0))

    def _wrap(self, ax, i):
        return i % self.g.shape[ax] if self.g.periodic[ax] else i

    def _t(self, ax, c):
        return c % self.g.shape[ax] if self.g.periodic[ax] else c + 1

    def _face(self, k, idx):
        shp = self.g.comp_shapes[k]
        flat = 0
        for i, n in zip(idx, shp):
            flat = flat * n + int(i)
        return int(self.g.offsets[k]) + flat

    def _buried(self, b, e, a, ca):
        g = self.g
        if not g.periodic[a] and not 0 <= ca < g.shape[a]:
            return False
        for side in (-1, 0):
            cell = list(e)
            cb = e[b] + side
            if g.periodic[b]:
                cb %= g.shape[b]
            elif not 0 <= cb < g.shape[b]:
                return False
            cell[b] = cb
            cell[a] = ca % g.shape[a] if g.periodic[a] else ca
            if not self.solid[tuple(cell)]:
                return False
        return True

    def apply(self, vec):
        """Sample values for a face vector (or columns of a 2D array)."""
        v = np.asarray(vec, dtype=float)
        out = np.zeros((len(self.samples),) + v.shape[1:])
        for s, (terms, _, _, _) in enumerate(self.samples):
            acc = 0.0
            for i, c in terms:
                acc = acc + c * v[i]
            out[s] = acc
        return out

    def gram(self, F, region="fluid"):
        F = np.asarray(F, dtype=float)
        S = np.zeros((F.shape[1], F.shape[1]))
        for terms, wa, wf, mult in self.samples:
            w = (wf if region == "fluid" else wa) * mult
            if w == 0.0:
                continue
            D = np.zeros(F.shape[1])
            for i, c in terms:
                D += c * F[i]
            S += w * np.outer(D, D)
        return S


def loop_divergence(grid, vec):
    g, d = grid, grid.dim
    out = np.zeros(g.n_cells)
    ls = LoopStrain.__new__(LoopStrain)
    ls.g = g
    for n, c in enumerate(itertools.product(*[range(s) for s in g.shape])):
        acc = 0.0
        for k in range(d):
            lo = ls._face(k, [c[j] if j == k else ls._t(j, c[j]) for j in range(d)])
            hi = ls._face(k, [ls._wrap(k, c[k] + 1) if j == k else ls._t(j, c[j]) for j in range(d)])
            acc += (vec[hi] - vec[lo]) / g.h
        out[n] = acc
    return out


def _q1_gradients(d, h, xi):
    """``dN_a/dx`` for the ``2^d`` corners at reference point ``xi`` (own formula)."""
    corners = list(itertools.product((0, 1), repeat=d))
    G = np.zeros((len(corners), d))
    for a, c in enumerate(corners):
        for g in range(d):
            v = 1.0
            for ax in range(d):
                f = xi[ax] if c[ax] else 1.0 - xi[ax]
                v *= ((1.0 if c[ax] else -1.0) / h) if ax == g else f
            G[a, g] = v
    return G


def loop_q1_strains(mesh, values):
    """Element-by-element strains at the Gauss points, ``(ne, ng, d, d)``."""
    d = mesh.dim
    x = np.asarray(values, dtype=float).reshape(-1, d)
    grads = [_q1_gradients(d, mesh.h, xi) for xi in mesh.gauss_points]
    out = np.zeros((mesh.n_elements, len(grads), d, d))
    for e in range(mesh.n_elements):
        ue = x[mesh.conn[e]]  # (2^d, d)
        for q, G in enumerate(grads):
            Gu = ue.T @ G  # du_i/dx_j
            out[e, q] = 0.5 * (Gu + Gu.T)
    return out


# ---------------------------------------------------------------- brute force

def _fluid_brute(sols, definition):
    ls = LoopStrain(sols.grid, sols.geom.solid)
    S = ls.gram(sols.family_matrix(), "fluid")
    d = sols.dim
    if definition == "gram":
        return S
    G, P, M = slice(0, d), slice(d, 2 * d), slice(2 * d, 3 * d)
    blk = {"+": P, "-": M}
    if definition == "L_gamma":
        return S[G, G]
    if definition in ("L+", "L-"):
        return S[blk[definition[1]], G]
    if definition[0] == "B":
        a, b = definition[1], definition[2]
        return S[blk[b], blk[a]]
    v = d - 1
    if definition[0] == "K":
        K = S[blk[definition[1]], blk[definition[1]]].copy()
        K[:v, v] *= 2.0
        K[v, :v] *= 2.0
        K[v, v] *= 2.0
        return K
    if definition[0] == "M":
        a = definition[1]
        other = "-" if a == "+" else "+"
        Mab = S[blk[other], blk[a]].copy()
        Mab[v, :] = 0.0
        Mab[:, v] = 0.0
        return Mab
    raise UnknownDefinition(definition)


def _elastic_energies(sols, fields):
    """``E[p, q] = int_{Z_s} C (D x_p + P_p) : (D x_q + P_q)`` by element loops."""
    s = sols.system
    mesh, d = s.mesh, s.dim
    C = s.C
    per_voxel = s.tensor.per_voxel
    strains = []
    for x, P in fields:
        e = loop_q1_strains(mesh, x)
        P = np.asarray(P, dtype=float)
        strains.append(e + (P if P.shape == (d, d) else P))
    w = mesh.gauss_weights
    n = len(fields)
    E = np.zeros((n, n))
    for el in range(mesh.n_elements):
        Ce = C[el] if per_voxel else C
        for q in range(len(w)):
            vecs = np.array([st[el, q].reshape(-1) for st in strains])  # (n, d*d)
            E += w[q] * (vecs @ Ce @ vecs.T)
    return E


def _elastic_brute(sols, definition):
    d = sols.dim
    n = d - 1
    s = sols.system
    if definition == "A_star":
        keys = sorted(sols.chi)
        E = _elastic_energies(sols, [(sols.chi[k], ce.unit_strain(d, *k)) for k in keys])
        A = np.full((d,) * 4, np.nan)
        for (p, kp), (q, kq) in itertools.product(enumerate(keys), repeat=2):
            for i, j in {kp, kp[::-1]}:
                for k, l in {kq, kq[::-1]}:
                    A[i, j, k, l] = E[p, q]
        return A
    if definition in ("a", "b", "c"):
        pr = ce.pairs(d, "inplane")
        fields = [(sols.get("chi", *p), ce.unit_strain(d, *p)) for p in pr]
        fields += [(sols.get("chiB", *p), s.prestrain("chiB", *p)) for p in pr]
        E = _elastic_energies(sols, fields) / s.solid_volume
        m = len(pr)
        sel = {"a": (0, 0), "b": (m, 0), "c": (m, m)}[definition]
        T = np.zeros((n,) * 4)
        for (p, kp), (q, kq) in itertools.product(enumerate(pr), repeat=2):
            for i, j in {kp, kp[::-1]}:
                for k, l in {kq, kq[::-1]}:
                    T[i, j, k, l] = E[sel[0] + p, sel[1] + q]
        return T
    raise UnknownDefinition(definition)


def brute_force_coefficient(sols, definition):
    """Recompute one coefficient tensor by direct per-voxel loops."""
    if isinstance(sols, cs.StokesCellSolutionSet):
        if definition not in FLUID_DEFS:
            raise UnknownDefinition(f"'{definition}' is not a fluid coefficient ({', '.join(FLUID_DEFS)})")
        return _fluid_brute(sols, definition)
    if isinstance(sols, ce.ElasticCellSolutionSet):
        if definition not in ELASTIC_DEFS:
            raise UnknownDefinition(f"'{definition}' is not an elastic tensor ({', '.join(ELASTIC_DEFS)})")
        return _elastic_brute(sols, definition)
    raise UnknownDefinition(f"no brute-force rule for {type(sols).__name__}")


def assembled_coefficient(obj, definition):
    """Pick the tensor called ``definition`` out of an assembled coefficient object."""
    if isinstance(obj, cs.FluidInterfaceCoefficients):
        if definition == "gram":
            return obj.gram
        if definition == "L_gamma":
            return obj.L_gamma
        head, tail = definition[0], definition[1:]
        table = {"L": obj.L, "B": obj.B, "K": obj.K, "M": obj.M}
        if head in table and tail in table[head]:
            return table[head][tail]
    elif isinstance(obj, ce.ElasticEffectiveTensors):
        if definition in ELASTIC_DEFS:
            return getattr(obj, definition)
    raise UnknownDefinition(definition)


def _family_scale(obj, name, a):
    # b* vanishes on mirror-symmetric cells; measure it against a* and c*
    if isinstance(obj, cs.FluidInterfaceCoefficients):
        return obj.scale()
    if name in ("a", "b", "c") and obj.a is not None:
        return max(np.abs(obj.a).max(), np.abs(obj.c).max())
    return np.abs(a[~np.isnan(a)]).max(initial=0.0)


def compare_with_brute_force(sols, assembled, definitions):
    """``{definition: max deviation relative to the tensor family scale}``."""
    out = {}
    for name in definitions:
        a = np.asarray(assembled_coefficient(assembled, name), dtype=float)
        b = brute_force_coefficient(sols, name)
        ok = ~np.isnan(a)
        scale = max(_family_scale(assembled, name, a), 1e-300)
        out[name] = float(np.abs(a[ok] - b[ok]).max(initial=0.0) / scale)
    return out


# ---------------------------------------------------------------- identity suites

@dataclass
class Check:
    name: str
    value: float
    bound: float

    @property
    def passed(self):
        return bool(np.isfinite(self.value) and self.value <= self.bound)


@dataclass
class IdentityReport:
    checks: list = field(default_factory=list)

    def add(self, name, value, bound):
        self.checks.append(Check(name, float(value), float(bound)))

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def failed(self):
        return [c.name for c in self.checks if not c.passed]

    def as_dict(self):
        return {"passed": self.passed,
                "checks": [{"name": c.name, "value": c.value, "bound": c.bound, "passed": c.passed}
                           for c in self.checks]}

    def to_json(self):
        return json.dumps(self.as_dict(), sort_keys=True, indent=1)

    def table(self):
        w = max([len(c.name) for c in self.checks] + [8])
        lines = [f"{'identity':<{w}}  {'value':>11}  {'bound':>9}  result"]
        for c in self.checks:
            lines.append(f"{c.name:<{w}}  {c.value:11.3e}  {c.bound:9.1e}  {'pass' if c.passed else 'FAIL'}")
        return "\n".join(lines)


def interface_form(S, X):
    """``X^T S X`` for triples ``X`` of shape ``(..., 3 d)``."""
    X = np.asarray(X, dtype=float)
    return np.einsum("...i,ij,...j->...", X, S, X)


def identity_suite(coeffs, tol=1e-9, probes=1000, seed=0):
    """Check the fluid coefficient identities; residuals are relative to the coefficient scale.

    Each identity is evaluated from the stored tensors, so a perturbed tensor
    fails exactly the identities it enters.
    """
    c = coeffs
    d = c.dim
    v = d - 1
    rep = IdentityReport()
    Lg = np.asarray(c.L_gamma)
    scale = c.scale()
    rep.add("L_sum", np.abs(c.L["+"] + c.L["-"] + Lg).max() / max(np.abs(Lg).max(), 1e-300), tol)
    for a in cs.SIDES:
        r = c.L[a] + sum(c.B[a + b].T for b in cs.SIDES)
        rep.add(f"L_B_{a}", np.abs(r).max() / scale, tol)
    for a in cs.SIDES:
        rep.add(f"KL_e{v}_{a}", np.abs((c.K[a] + c.L[a])[:, v]).max() / scale, tol)
    rep.add("L_gamma_symmetric", np.abs(Lg - Lg.T).max() / scale, tol)
    rep.add("B_cross_transpose", np.abs(c.B["+-"] - c.B["-+"].T).max() / scale, tol)
    for a in cs.SIDES:
        rep.add(f"B_{a}{a}_symmetric", np.abs(c.B[a + a] - c.B[a + a].T).max() / scale, tol)
    # The positivity checks use the cell Gram matrix when it is at hand: it is
    # the object whose positivity is claimed, and the form rebuilt from the
    # tensors would repeat the L-sum identity on its equal-triple null space.
    if c.gram is not None:
        S, label = np.asarray(c.gram, dtype=float), "gram"
    else:
        from .macro import interface_gram

        S, label = interface_gram(c), "form"
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((probes, 3 * d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    q = interface_form(S, X)
    rep.add(f"{label}_psd", max(0.0, -q.min()) / scale, tol)
    E = rng.standard_normal((probes, d))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    q_eq = interface_form(S, np.concatenate([E, E, E], axis=1))
    rep.add(f"{label}_equal_triples", np.abs(q_eq).max() / scale, tol)
    return rep


def stokes_solution_checks(sols, tol=1e-9):
    """Checks that need the cell fields (completeness, divergence)."""
    rep = IdentityReport()
    rep.add("completeness", max(sols.completeness_residual()), tol)
    Dv = sols.grid.divergence_matrix() @ sols.family_matrix()
    fluid = sols.geom.fluid.reshape(-1)
    rep.add("max_divergence", np.abs(Dv[fluid]).max() * sols.grid.h, tol)
    return rep


def elastic_identity_suite(sols, tensors=None, tol=1e-9):
    """Energy vs stress form, index-``d`` vanishing, and the ``a* = A*/|Z_s|`` cross-check."""
    rep = IdentityReport()
    d = sols.dim
    v = d - 1
    A = ce.assemble_Astar(sols, "energy")
    As = ce.assemble_Astar(sols, "stress")
    ok = ~np.isnan(A)
    nrm = max(np.abs(A[ok]).max(initial=0.0), 1e-300)
    rep.add("A_star_forms", np.abs(A[ok] - As[ok]).max(initial=0.0) / nrm, tol)
    mask = np.zeros(A.shape, dtype=bool)
    for idx in np.ndindex(*A.shape):
        mask[idx] = v in idx
    vals = A[mask & ok]
    if vals.size:
        rep.add(f"A_star_index{v}_vanishing", np.abs(vals).max() / nrm, tol)
    sym = max(np.nanmax(np.abs(A - A.transpose(2, 3, 0, 1))), np.nanmax(np.abs(A - A.transpose(1, 0, 2, 3))))
    rep.add("A_star_symmetry", sym / nrm, tol)
    if sols.chiB:
        tens = tensors or ce.effective_tensors(sols)
        mem = tens.membrane() / tens.solid_volume
        rep.add("a_vs_A_star", np.abs(tens.a - mem).max() / max(np.abs(mem).max(), 1e-300), tol)
    return rep


# ---------------------------------------------------------------- refinement studies

@dataclass
class ConvergenceRow:
    name: str
    resolutions: list
    values: list
    orders: list
    limit: float = None
    limit_range: tuple = None
    note: str = ""

    def as_dict(self):
        return {"name": self.name, "resolutions": self.resolutions, "values": self.values,
                "orders": self.orders, "limit": self.limit,
                "limit_range": None if self.limit_range is None else list(self.limit_range),
                "note": self.note}


def _observed_order(res, d0, d1):
    """Order ``p`` with ``d0/d1 = (h0^p - h1^p)/(h1^p - h2^p)``, ``h = 1/res``."""
    r0, r1 = res[1] / res[0], res[2] / res[1]
    if r0 == r1:
        return math.log(d0 / d1) / math.log(r1)
    h = [1.0 / n for n in res]

    def g(p):
        return (h[0] ** p - h[1] ** p) / (h[1] ** p - h[2] ** p) - d0 / d1

    eps = 1e-9
    lo, hi = (eps, 50.0) if g(eps) < 0 else (-50.0, -eps)
    if g(lo) * g(hi) > 0:
        return math.inf if hi > 0 else -math.inf
    return brentq(g, lo, hi, xtol=1e-12)


def convergence_table(name, resolutions, values, unstable=0.5, atol=1e-12, scale=None):
    """Observed orders and Richardson limit from values on increasing resolutions.

    ``scale`` (default: the largest value) sets the size below which
    differences count as round-off.  When an order is non-positive or the
    orders spread by more than ``unstable``, the limit is reported as the range
    spanned by the last value and the extrapolations with each positive order.
    When successive differences change sign no limit is extrapolated; the
    orders (from the magnitudes) are kept and the last two values bound the range.
    """
    res = [int(r) for r in resolutions]
    if len(res) < 3 or any(b <= a for a, b in zip(res, res[1:])):
        raise ValueError("need at least three increasing resolutions")
    vals = [float(x) for x in values]
    diffs = [b - a for a, b in zip(vals, vals[1:])]
    ref = max(max(abs(x) for x in vals), 1e-300) if scale is None else max(float(scale), 1e-300)
    row = ConvergenceRow(name, res, vals, [])
    if max(abs(x) for x in diffs) <= atol * ref:
        row.limit = vals[-1]
        row.note = "converged at the coarsest resolution"
        return row
    for i in range(len(diffs) - 1):
        r = res[i + 2] / res[i + 1]
        r0 = res[i + 1] / res[i]
        d0, d1 = abs(diffs[i]), abs(diffs[i + 1])
        if d1 == 0.0 or d0 == 0.0:
            row.orders.append(math.inf if d1 == 0.0 else -math.inf)
            continue
        row.orders.append(_observed_order(res[i:i + 3], d0, d1))
    notes = []
    tiny = atol * ref
    if any(a * b < 0 and min(abs(a), abs(b)) > tiny for a, b in zip(diffs, diffs[1:])):
        # sign change: no asymptotic power law, Richardson does not apply
        warnings.warn(f"{name}: differences change sign", NonMonotoneWarning, stacklevel=2)
        row.note = "oscillatory; range of the last two values reported"
        row.limit_range = (min(vals[-2:]), max(vals[-2:]))
        return row
    if any(abs(b) >= abs(a) for a, b in zip(diffs, diffs[1:])):
        warnings.warn(f"{name}: successive differences do not shrink", NonMonotoneWarning, stacklevel=2)
        notes.append("non-monotone")
    positive = [p for p in row.orders if np.isfinite(p) and p > 0]
    r = res[-1] / res[-2]
    ext = [vals[-1] + diffs[-1] / (r ** q - 1.0) for q in positive]
    if positive and positive[-1] == row.orders[-1]:
        row.limit = ext[-1]
    if not positive or len(positive) < len(row.orders) or max(positive) - min(positive) > unstable:
        cand = ext + [vals[-1]]
        row.limit_range = (min(cand), max(cand))
        notes.append("unstable order, range reported")
    row.note = "; ".join(notes)
    return row


_SEL = re.compile(r"^\s*([A-Za-z_+\-]+)\s*(?:\[([0-9,\s]*)\])?\s*$")


def parse_selector(text):
    m = _SEL.match(text)
    if not m:
        raise UnknownDefinition(f"bad quantity selector '{text}'")
    name = m.group(1)
    idx = tuple(int(x) for x in m.group(2).split(",")) if m.group(2) else ()
    return name, idx


def evaluate_quantities(desc, resolution, quantities, tensor=None, tol=1e-10, with_scale=False):
    """Values of the selected quantities for one resolution of a geometry descriptor.

    With ``with_scale`` also returns, per quantity, the largest entry of the
    tensor it was taken from (the round-off reference for that entry).
    """
    spec = dict(desc)
    spec["resolution"] = int(resolution)
    geom = geo.build_cell_geometry(spec)
    parsed = [parse_selector(q) for q in quantities]
    out, scales = {}, {}
    need_fluid = any(n in FLUID_DEFS or n == "completeness" for n, _ in parsed)
    need_el = any(n in ELASTIC_DEFS for n, _ in parsed)
    fl = el = None
    if need_fluid:
        sols = cs.solve_all(geom, tol=tol)
        fl = (sols, cs.assemble_fluid_coefficients(sols))
    if need_el:
        t = tensor or ce.MicroElasticTensor.isotropic(geom.dim, 1.0, 1.0)
        bend = any(n in ("a", "b", "c") for n, _ in parsed)
        es = ce.solve_elastic_cells(geom, t, bending=bend, tol=tol)
        el = ce.effective_tensors(es)
    for q, (name, idx) in zip(quantities, parsed):
        if name == "completeness":
            out[q] = scales[q] = max(fl[0].completeness_residual())
            continue
        if name in FLUID_DEFS:
            arr = assembled_coefficient(fl[1], name)
        elif name in ELASTIC_DEFS:
            arr = assembled_coefficient(el, name)
        else:
            raise UnknownDefinition(f"unknown quantity '{name}'")
        a = np.nan_to_num(np.asarray(arr, dtype=float))
        out[q] = float(a[idx]) if idx else float(np.abs(a).max())
        scales[q] = float(np.abs(a).max())
    return (out, scales) if with_scale else out


def refinement_study(desc, resolutions, quantities, tensor=None, tol=1e-10):
    """Convergence table per selected quantity (e.g. ``'L_gamma[0,0]'``, ``'A_star[0,0,0,0]'``)."""
    per = [evaluate_quantities(desc, r, quantities, tensor, tol, with_scale=True) for r in resolutions]
    rows = []
    for q in quantities:
        vals = [p[0][q] for p in per]
        if q.startswith("completeness"):
            # a residual that should vanish at every resolution, not a converging value
            row = ConvergenceRow(q, list(resolutions), vals, [], max(vals),
                                 note="identity residual" if max(vals) <= 1e-9 else "identity residual above 1e-9")
        else:
            row = convergence_table(q, resolutions, vals, scale=max(p[1][q] for p in per))
        rows.append(row)
    return rows


def format_table(rows):
    lines = []
    for r in rows:
        lines.append(r.name)
        for i, (n, v) in enumerate(zip(r.resolutions, r.values)):
            order = f"{r.orders[i - 2]:.3f}" if i >= 2 and i - 2 < len(r.orders) else ""
            lines.append(f"  N={n:<5d} {v: .12e}  {order}")
        if r.limit_range is not None:
            lines.append(f"  limit in [{r.limit_range[0]:.10e}, {r.limit_range[1]:.10e}]")
        elif r.limit is not None:
            lines.append(f"  limit  {r.limit: .12e}")
        if r.note:
            lines.append(f"  ({r.note})")
    return "\n".join(lines)


# ---------------------------------------------------------------- finite-difference checks

def _rel(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.abs(a - b).max(initial=0.0) / max(np.abs(b).max(initial=0.0), 1e-300))


def fd_check(operator, *args):
    """Relative max deviation between an assembled operator and its loop stencil.

    ``operator`` is one of
    ``'divergence'`` (grid, face vector),
    ``'strain'`` (grid, face vector[, solid]),
    ``'q1_strain'`` (mesh, nodal values),
    ``'saddle'`` (SaddleFactor, velocity, pressure).
    """
    if operator == "divergence":
        grid, vec = args
        return _rel(grid.divergence_matrix() @ vec, loop_divergence(grid, vec))
    if operator == "strain":
        from .grid import StrainOperator

        grid, vec = args[:2]
        solid = args[2] if len(args) > 2 else None
        return _rel(StrainOperator(grid, solid).apply(vec), LoopStrain(grid, solid).apply(vec))
    if operator == "q1_strain":
        mesh, vals = args
        return _rel(mesh.strains(vals), loop_q1_strains(mesh, vals))
    if operator == "saddle":
        fac, u, p = args
        full = fac.K @ np.concatenate([u, p])
        block = np.concatenate([fac.A @ u + fac.B.T @ p, fac.B @ u])
        return _rel(full, block)
    raise UnknownDefinition(f"no finite-difference check for '{operator}'")
