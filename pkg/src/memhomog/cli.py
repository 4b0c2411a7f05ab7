"""Command-line entry point.

Exit codes: 0 success, 1 check failed (inadmissible geometry, failed
identity, missing cached result), 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import cell_elastic as ce
from . import cell_stokes as cs
from . import config as cfgmod
from . import geometry as geo
from . import macro
from . import verify
from .errors import (AdmissibilityError, BlowUp, ConfigError, FormatError, IncompatibleRHS, MemhomogError,
                     NoConvergence, NonMonotoneWarning, ShapeError, SingularBlock, SingularSystem)
from .grid import export_csv, export_vtk

log = logging.getLogger("memhomog")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3
SOLVER_ERRORS = (NoConvergence, SingularBlock, SingularSystem, IncompatibleRHS, BlowUp)


def _dumps(doc):
    return cs.dumps(doc)


def _write(path, doc):
    Path(path).write_text(_dumps(doc) + "\n")


# ---------------------------------------------------------------- shared steps

def _tensor_key(t):
    return hashlib.sha256(np.ascontiguousarray(t.C, dtype="<f8").tobytes()).hexdigest()[:16]


def fluid_coefficients(cfg, geom=None):
    """``(solutions, coefficients, geometry, cache_hit)``."""
    geom = geom or cfgmod.cell_geometry(cfg)
    tol = cfgmod.tolerance(cfg)
    sols, hit = cs.solve_all_cached(geom, tol=tol, method=cfg["discretization"]["method"],
                                    cache=cfgmod.cache_path(cfg))
    return sols, cs.assemble_fluid_coefficients(sols), geom, hit


def elastic_tensors(cfg, bending):
    """Effective elastic tensors, cached as a JSON document when a cache is configured.

    Returns ``(tensors, document, cache_hit)``; the tensors are reduced to 2D
    when the macro problem is 2D and the elastic cell is 3D.
    """
    egeom = cfgmod.elastic_geometry(cfg)
    tensor = cfgmod.micro_tensor(cfg, egeom.dim)
    tol = cfgmod.tolerance(cfg)
    root = cs.cache_dir(cfgmod.cache_path(cfg))
    path = None
    if root is not None:
        key = f"{egeom.hash[:24]}_{_tensor_key(tensor)}_{int(bool(bending))}_{tol:.0e}"
        path = root / f"elastic_{key}.json"
    if path is not None and path.exists():
        doc = json.loads(path.read_text())
        hit = True
    else:
        sols = ce.solve_elastic_cells(egeom, tensor, bending=bending, tol=tol)
        doc = ce.tensor_document(ce.effective_tensors(sols), egeom, sols.stats, tol)
        hit = False
        if path is not None:
            path.write_text(_dumps(doc))
    tens = ce.ElasticEffectiveTensors.from_dict(doc["tensors"])
    if cfgmod.reduce_needed(cfg, egeom):
        tens = tens.reduce_to_2d()
        doc = dict(doc, reduced_to_2d=True, tensors=tens.as_dict())
    return tens, doc, hit


def _doc_names(geom):
    h = geom.hash[:12]
    return f"fluid_{h}.json", f"elastic_{h}.json"


# ---------------------------------------------------------------- commands

def cmd_check_geometry(args, cfg):
    geom = cfgmod.cell_geometry(cfg, check=False)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = geo.check_admissibility(geom)
    doc = {
        "admissible": not report,
        "violations": report,
        "warnings": [str(w.message) for w in caught],
        "geometry": geo.phase_fields(geom),
        "tags": geo.tag_counts(geom),
    }
    if args.json:
        _write(args.json, doc)
    if report:
        for line in report:
            print(f"FAIL {line}")
    else:
        print(f"admissible: dim={geom.dim} resolution={geom.resolution} hash={geom.hash[:12]}")
    for w in doc["warnings"]:
        print(f"warning: {w}")
    print(f"solid volume {doc['geometry']['solid_volume']:.6g}  |Gamma| {doc['geometry']['gamma_area']:.6g}")
    return EXIT_FAIL if report else EXIT_OK


def cmd_solve_cells(args, cfg):
    gamma = int(cfg["macro"]["gamma"])
    sols, coeffs, geom, hit = fluid_coefficients(cfg)
    print(f"fluid cell problems: {'cache hit' if hit else 'solved'} ({2 * geom.dim + 1} problems)")
    out = cfgmod.output_dir(cfg, args.output)
    fname, ename = _doc_names(geom)
    fdoc = cs.coefficient_document(coeffs, geom, sols.stats, cfgmod.tolerance(cfg))
    _write(out / fname, fdoc)
    print(f"wrote {out / fname}")
    if not args.fluid_only:
        tens, edoc, ehit = elastic_tensors(cfg, bending=(gamma == 3))
        print(f"elastic cell problems: {'cache hit' if ehit else 'solved'}"
              f"{' (with bending correctors)' if gamma == 3 else ''}")
        _write(out / ename, edoc)
        print(f"wrote {out / ename}")
    return EXIT_OK


def cmd_coefficients(args, cfg):
    geom = cfgmod.cell_geometry(cfg)
    out = cfgmod.output_dir(cfg, args.output)
    found = False
    for name in _doc_names(geom):
        p = out / name
        if p.exists():
            found = True
            print(p.read_text().rstrip())
    if not found:
        print(f"no coefficient documents for geometry {geom.hash[:12]} in {out}; run solve-cells first",
              file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_verify(args, cfg):
    sols, coeffs, geom, _ = fluid_coefficients(cfg)
    rep = verify.identity_suite(coeffs, tol=args.identity_tol, probes=args.probes, seed=args.seed)
    extra = verify.stokes_solution_checks(sols, tol=args.identity_tol)
    rep.checks += extra.checks
    if args.brute_force:
        for name, dev in verify.compare_with_brute_force(sols, coeffs, verify.FLUID_DEFS).items():
            rep.add(f"brute_force_{name}", dev, 1e-12)
    if not args.fluid_only:
        egeom = cfgmod.elastic_geometry(cfg)
        tensor = cfgmod.micro_tensor(cfg, egeom.dim)
        es = ce.solve_elastic_cells(egeom, tensor, bending=True, tol=cfgmod.tolerance(cfg))
        tens = ce.effective_tensors(es)
        rep.checks += verify.elastic_identity_suite(es, tens, tol=args.identity_tol).checks
        if args.brute_force:
            for name, dev in verify.compare_with_brute_force(es, tens, verify.ELASTIC_DEFS).items():
                rep.add(f"brute_force_{name}", dev, 1e-12)
    print(rep.table())
    if args.json:
        _write(args.json, rep.as_dict())
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_solve_macro(args, cfg):
    gamma = int(cfg["macro"]["gamma"])
    _, coeffs, _, _ = fluid_coefficients(cfg)
    tens, _, _ = elastic_tensors(cfg, bending=(gamma == 3))
    domain = cfgmod.macro_domain(cfg)
    T, dt = cfgmod.time_grid(cfg)
    try:
        forcing = macro.Forcing.from_config(domain.dim, cfgmod.forcing_section(cfg))
    except (FormatError, ValueError, TypeError) as exc:
        raise ConfigError(f"[forcing]: {exc}") from None
    problem = macro.assemble_macro(domain, coeffs, tens, gamma)
    every = int(cfg["run"].get("snapshot_every", 0))
    traj = macro.solve_transient(problem, forcing, T, dt, snapshot_every=every, tol=cfgmod.tolerance(cfg))
    out = cfgmod.output_dir(cfg, args.output)
    csv_path = out / f"trajectory_gamma{gamma}.csv"
    macro.write_trajectory_csv(csv_path, traj)
    if every:
        for st in traj.states:
            arrays = {f"u_{k}": v for k, v in st.u.items()}
            np.savez_compressed(out / f"snapshot_{st.step:06d}.npz", y=st.y, p=st.p, t=st.t, **arrays)
    last = traj.diagnostics[-1]
    line = f"final t={last['t']:.6g} energy={last['energy']:.6e} sigma_flux={last['sigma_flux']:.6e}"
    if gamma == 3:
        line += f" deflection_max={last['deflection_max']:.6e}"
    print(f"wrote {csv_path}")
    print(line)
    return EXIT_OK


def cmd_refine_study(args, cfg):
    desc = cfgmod.geometry_descriptor(cfg)
    desc.pop("resolution", None)
    tensor = None
    if any(verify.parse_selector(q)[0] in verify.ELASTIC_DEFS for q in args.quantity):
        tensor = cfgmod.micro_tensor(cfg, int(desc.get("dim", 3)))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NonMonotoneWarning)
        rows = verify.refinement_study(desc, args.resolutions, args.quantity, tensor=tensor,
                                       tol=cfgmod.tolerance(cfg))
    print(verify.format_table(rows))
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if args.json:
        _write(args.json, {"rows": [r.as_dict() for r in rows]})
    return EXIT_OK


def _floats(text, n=None):
    if text is None:
        return None
    vals = [float(x) for x in str(text).split(",") if x.strip()]
    if n is not None and len(vals) != n:
        raise ConfigError(f"expected {n} comma-separated values, got '{text}'")
    return vals


def cmd_reconstruct(args, cfg):
    sols, _, geom, _ = fluid_coefficients(cfg)
    d = geom.dim
    dtu = _floats(args.dtu, d) or [0.0] * d
    vp = _floats(args.vplus, d) or [0.0] * d
    vm = _floats(args.vminus, d) or [0.0] * d
    vel = cs.reconstruct_membrane_velocity(sols, dtu, vp, vm)[0]
    prs = cs.reconstruct_membrane_pressure(sols, dtu, vp, vm)[0]
    out = cfgmod.output_dir(cfg, args.output)
    export_vtk(out / "membrane_fields.vtk", sols.grid, {"velocity": vel, "pressure": prs})
    print(f"wrote {out / 'membrane_fields.vtk'}")
    if args.strain:
        # u1 lives on the elastic cell, whose dimension may differ from the fluid cell's
        egeom = cfgmod.elastic_geometry(cfg)
        n = egeom.dim - 1
        E = np.array(_floats(args.strain, n * n)).reshape(n, n)
        es = ce.solve_elastic_cells(egeom, cfgmod.micro_tensor(cfg, egeom.dim), bending=False,
                                    which="inplane", tol=cfgmod.tolerance(cfg))
        u1 = ce.reconstruct_u1(E, es)[0]
        export_csv(out / "u1.csv", u1)
        print(f"wrote {out / 'u1.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="memhomog", description="Effective interface laws for thin periodic membranes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp_ = sub.add_parser(name, help=help_)
        sp_.add_argument("config", help="TOML or JSON run configuration")
        sp_.add_argument("--dim", type=int, choices=(2, 3))
        sp_.add_argument("--gamma", type=int, choices=(1, 3))
        sp_.add_argument("--resolution", type=int)
        sp_.add_argument("--tol", type=float)
        sp_.add_argument("--output", help="output directory (default: run.output)")
        sp_.set_defaults(func=fn)
        return sp_

    c = add("check-geometry", cmd_check_geometry, "voxelise the cell and check admissibility")
    c.add_argument("--json", help="write the report as JSON")
    c = add("solve-cells", cmd_solve_cells, "solve the cell problems and write coefficient documents")
    c.add_argument("--fluid-only", action="store_true")
    add("coefficients", cmd_coefficients, "print the stored coefficient documents")
    c = add("verify-identities", cmd_verify, "run the coefficient identity suite")
    c.add_argument("--json")
    c.add_argument("--identity-tol", type=float, default=1e-9)
    c.add_argument("--probes", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--brute-force", action="store_true", help="also compare with loop recomputation")
    c.add_argument("--fluid-only", action="store_true")
    add("solve-macro", cmd_solve_macro, "time-step the coupled macroscopic problem")
    c = add("refine-study", cmd_refine_study, "convergence table over cell resolutions")
    c.add_argument("--resolutions", type=int, nargs="+", required=True)
    c.add_argument("--quantity", nargs="+", required=True, help="e.g. 'L_gamma[0,0]' 'A_star[0,0,0,0]'")
    c.add_argument("--json")
    c = add("reconstruct", cmd_reconstruct, "membrane velocity/pressure and u1 correctors from macro values")
    c.add_argument("--dtu", help="comma-separated d values of du/dt")
    c.add_argument("--vplus")
    c.add_argument("--vminus")
    c.add_argument("--strain", help="row-major in-plane strain of the elastic cell, for u1")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load_config(args.config)
        cfg = cfgmod.apply_overrides(cfg, args.dim, args.gamma, args.resolution, args.tol)
        return args.func(args, cfg)
    except (ConfigError, FormatError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AdmissibilityError as exc:
        print(f"inadmissible geometry: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SOLVER_ERRORS as exc:
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except MemhomogError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
