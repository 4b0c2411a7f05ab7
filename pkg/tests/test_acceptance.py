"""Acceptance criteria, one test (and one summary line) per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the PASS/FAIL lines are
printed in the "acceptance criteria" section at the end of the session.
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from memhomog import cell_stokes as cs
from memhomog import geometry as geo
from memhomog import macro as mc
from memhomog import verify as vf
from memhomog.linsolve import project_out

from conftest import BALL, BOX, BOX2, DISC, cell

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
FORCE = ["sin(pi*x)", "-sin(pi*x)"]
MESHES = (8, 16, 32)


def domain(m):
    return geo.MacroDomain(2, (0,), (1,), 1.0, m)


@pytest.fixture(scope="module")
def transients(disc16, elas2d):
    """Forced runs (forcing in Omega^+ only) for both scalings on three meshes."""
    out = {}
    for gamma in (1, 3):
        out[gamma] = [mc.solve_transient(mc.assemble_macro(domain(m), disc16.coeffs, elas2d, gamma),
                                         mc.Forcing(2, FORCE), 0.1, 0.01) for m in MESHES]
    return out


def orders(values):
    v = np.asarray(values, dtype=float)
    return np.log2(v[:-1] / v[1:])


# 1 --------------------------------------------------------------------------

def test_criterion_1_completeness(accept):
    t0 = time.perf_counter()
    sols = cs.solve_all(cell(DISC, 32))
    res = sols.completeness_residual()
    elapsed = time.perf_counter() - t0
    ok = max(res) <= 1e-9 and elapsed <= 10.0
    accept(1, ok, f"disc r=0.3 N=32: max residual {max(res):.2e} (<= 1e-9), {elapsed:.2f} s (<= 10 s)")
    assert ok


# 2 --------------------------------------------------------------------------

def test_criterion_2_L_identities(accept):
    t0 = time.perf_counter()
    worst = {}
    for name, desc, n in (("disc", DISC, 32), ("box2d", BOX2, 32), ("ball", BALL, 12), ("box3d", BOX, 12)):
        c = cs.assemble_fluid_coefficients(cs.solve_all(cell(desc, n)))
        d, v = c.dim, c.dim - 1
        r_sum = np.abs(c.L["+"] + c.L["-"] + c.L_gamma).max() / np.abs(c.L_gamma).max()
        r_lb = max(np.abs(c.L[a] + sum(c.B[a + b].T for b in cs.SIDES)).max() for a in cs.SIDES) / c.scale()
        r_kl = max(np.abs((c.K[a] + c.L[a])[:, v]).max() for a in cs.SIDES) / c.scale()
        worst[f"{name}{d}d"] = max(r_sum, r_lb, r_kl)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-9 and elapsed <= 120.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    accept(2, ok, f"relative residuals {detail} (<= 1e-9); {elapsed:.1f} s (<= 120 s)")
    assert ok


# 3 --------------------------------------------------------------------------

def test_criterion_3_semidefiniteness(accept, disc32, ball8):
    vals = {}
    for name, f in (("disc32", disc32), ("ball8", ball8)):
        rep = vf.identity_suite(f.coeffs, probes=1000, seed=7)
        chk = {c.name: c.value for c in rep.checks}
        vals[name] = (chk["gram_psd"], chk["gram_equal_triples"])
    ok = all(a <= 1e-9 and b <= 1e-9 for a, b in vals.values())
    detail = ", ".join(f"{k}: min-form deficit {a:.1e}, equal-triple |form| {b:.1e}" for k, (a, b) in vals.items())
    accept(3, ok, f"1000 probes; {detail} (relative, <= 1e-9)")
    assert ok


# 4 --------------------------------------------------------------------------

def test_criterion_4_F1_chain(accept, transients):
    runs = transients[1]
    jumps = [tr.diagnostics[-1]["jump_max"] for tr in runs]
    monotone = all(a > b for a, b in zip(jumps, jumps[1:]))
    f1 = max(max(d["F1_rel"] for d in tr.diagnostics[1:]) for tr in runs)
    ok = monotone and f1 <= 1e-8
    accept(4, ok, f"gamma=1 stress-jump residual {', '.join(f'{j:.2e}' for j in jumps)} on meshes "
                  f"{MESHES} (monotone: {monotone}); max F1/scale over all steps {f1:.1e} (<= 1e-8)")
    assert ok


# 5 --------------------------------------------------------------------------

def test_criterion_5_index_vanishing(accept, cross8):
    sols, tens = cross8
    A = tens.A_star
    v = sols.dim - 1
    mask = np.array([v in idx for idx in np.ndindex(*A.shape)]).reshape(A.shape)
    vanish = np.abs(A[mask]).max() / np.abs(A).max()
    # correctors of the pairs (l, v) are -y_v e_l up to rigid motions
    system = sols.system
    y = system.mesh.vertex_lattice_index() * system.mesh.h + system.mesh.origin
    corr = 0.0
    for l in range(sols.dim):
        exact = np.zeros_like(sols.chi[(l, v)])
        exact[:, l] = -y[:, v]
        exact = project_out(exact.reshape(-1), system.kernel, system.weights)
        got = sols.chi[(l, v)].reshape(-1)
        corr = max(corr, np.abs(got - exact).max() / np.abs(exact).max())
    ok = vanish <= 1e-9 and corr <= 1e-9
    accept(5, ok, f"cross cell N=8: max |A*| with a vertical index / |A*| = {vanish:.1e} (<= 1e-9); "
                  f"corrector vs -y3 e_l: {corr:.1e}")
    assert ok


# 6 --------------------------------------------------------------------------

def test_criterion_6_gamma3_jump_law_consistent(accept, transients):
    res = [tr.diagnostics[-1]["normal_residual"] for tr in transients[3]]
    p = orders(res)
    ok = all(a > b for a, b in zip(res, res[1:])) and p.min() >= 0.8
    accept("6a", ok, f"gamma=3 jump vs energy-consistent law: residual {', '.join(f'{r:.2e}' for r in res)}, "
                     f"orders {', '.join(f'{q:.2f}' for q in p)} (>= 0.8)")
    assert ok


@pytest.mark.xfail(strict=True, reason="sign of the K terms as literally stated conflicts with the "
                                        "energy-consistent coupling; see the decisions ledger")
def test_criterion_6_gamma3_jump_law_literal(accept, transients):
    res = [tr.diagnostics[-1]["normal_residual_literal"] for tr in transients[3]]
    p = orders(res)
    ok = all(a > b for a, b in zip(res, res[1:])) and p.min() >= 0.8
    accept("6b", ok, f"gamma=3 jump vs law with literal K signs: residual {', '.join(f'{r:.2e}' for r in res)}, "
                     f"orders {', '.join(f'{q:.2f}' for q in p)} (expected failure)")
    assert ok


# 7 --------------------------------------------------------------------------

def test_criterion_7_energy_stability(accept, disc16, elas2d):
    worst, runs = -np.inf, 0
    for gamma in (1, 3):
        P = mc.assemble_macro(domain(16), disc16.coeffs, elas2d, gamma)
        for dt in (1e-3, 1e-2, 1e-1):
            s0 = P.random_state(seed=11 + gamma)
            tr = mc.solve_transient(P, None, 200 * dt, dt, initial=s0)
            E = tr.column("energy")
            assert len(E) == 201
            worst = max(worst, float(np.max(np.diff(E)) / E[0]))
            runs += 1
    # round-off allowance relative to the initial energy
    ok = worst <= 1e-12
    accept(7, ok, f"{runs} runs x 200 implicit Euler steps, zero forcing, random data: "
                  f"max (E[n+1]-E[n])/E[0] = {worst:.1e} (<= 0 up to 1e-12 round-off)")
    assert ok


# 8 --------------------------------------------------------------------------

def test_criterion_8_mass_exchange(accept, transients):
    flux, bal = np.inf, 0.0
    for gamma in (1, 3):
        for tr in transients[gamma]:
            d = tr.diagnostics[-1]
            assert d["t"] == pytest.approx(0.1)
            flux = min(flux, abs(d["sigma_flux"]))
            bal = max(bal, max(x["flux_balance"] for x in tr.diagnostics))
    ok = flux >= 1e-6 and bal <= 1e-9
    accept(8, ok, f"forcing in Omega+ only: min |Sigma flux| at t=0.1 {flux:.3e} (>= 1e-6); "
                  f"max |out of Omega+ - into Omega-| {bal:.1e} (<= 1e-9)")
    assert ok


# 9 --------------------------------------------------------------------------

def test_criterion_9_oracles(accept, disc16, ball8, cross8):
    dev = {}
    for name, f in (("disc16", disc16), ("ball8", ball8)):
        dev[name] = max(vf.compare_with_brute_force(f.sols, f.coeffs, vf.FLUID_DEFS).values())
    dev["cross8"] = max(vf.compare_with_brute_force(cross8[0], cross8[1], vf.ELASTIC_DEFS).values())
    es = [mc.solve_manufactured(n, 0.1, 0.1)[0] for n in (8, 16, 32, 64)]
    p_space = orders(es)
    v = [mc.solve_manufactured(16, dt, 0.2, "quadratic")[1] for dt in (0.04, 0.02, 0.01, 0.005)]
    p_time = orders([np.abs(v[i] - v[i + 1]).max() for i in range(3)])
    ok = (max(dev.values()) <= 1e-12 and abs(p_space[-1] - 2.0) <= 0.2 and abs(p_time[-1] - 1.0) <= 0.15)
    accept(9, ok, f"brute force max rel dev {', '.join(f'{k} {x:.1e}' for k, x in dev.items())} (<= 1e-12); "
                  f"spatial orders {', '.join(f'{q:.2f}' for q in p_space)}; "
                  f"temporal orders {', '.join(f'{q:.2f}' for q in p_time)}")
    assert ok


# 10 -------------------------------------------------------------------------

def test_criterion_10_determinism(accept, tmp_path):
    docs = []
    for i in range(2):
        d = tmp_path / f"run{i}"
        d.mkdir()
        env = dict(os.environ, MEMHOMOG_CACHE=str(d / "cache"))
        subprocess.run([sys.executable, "-m", "memhomog.cli", "solve-cells", str(CONFIGS / "disc2d.toml"),
                        "--output", "o"], cwd=d, env=env, check=True, capture_output=True)
        docs.append({p.name: p.read_bytes() for p in sorted((d / "o").glob("*.json"))})
    ok = docs[0] == docs[1] and len(docs[0]) == 2
    accept(10, ok, f"two cold-cache CLI runs: {len(docs[0])} JSON documents, byte-identical: {docs[0] == docs[1]}")
    assert ok
