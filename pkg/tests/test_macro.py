import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memhomog import cell_elastic as ce
from memhomog import cell_stokes as cs
from memhomog import geometry as geo
from memhomog import macro as mc
from memhomog.errors import ConfigError, DimensionMismatch

FORCE = ["sin(pi*x)", "-sin(pi*x)"]


def problem(disc16, elas2d, gamma, m=8, **kw):
    dom = geo.MacroDomain(2, (0,), (1,), 1.0, m)
    return mc.assemble_macro(dom, disc16.coeffs, elas2d, gamma, **kw)


@pytest.fixture(scope="module")
def runs(disc16, elas2d):
    """gamma -> list of final diagnostics on meshes 8, 16, 32 (forcing in Omega^+)."""
    out = {}
    for gamma in (1, 3):
        out[gamma] = []
        for m in (8, 16, 32):
            tr = mc.solve_transient(problem(disc16, elas2d, gamma, m), mc.Forcing(2, FORCE), 0.1, 0.01)
            out[gamma].append(tr)
    return out


def test_dimension_checks(disc16, elas2d, ball8):
    dom = geo.MacroDomain(2, (0,), (1,), 1.0, 4)
    with pytest.raises(DimensionMismatch):
        mc.assemble_macro(dom, ball8.coeffs, elas2d, 1)
    with pytest.raises(ValueError):
        mc.assemble_macro(dom, disc16.coeffs, elas2d, 2)


def test_forcing_whitelist():
    f = mc.compile_expression("sin(pi*x) * exp(-t) + 2*z", 2)
    assert f([np.array(0.5), np.array(1.0)], 0.0) == pytest.approx(3.0)
    for bad in ("__import__('os')", "x.real", "y", "abs(x)", "x ** 2", "sin(x"):
        with pytest.raises(ConfigError):
            mc.compile_expression(bad, 2)
    with pytest.raises(ConfigError):
        mc.Forcing(2, ["0"])
    assert mc.Forcing(2).is_zero and not mc.Forcing(2, FORCE).is_zero


def test_forcing_window(disc16, elas2d):
    P = problem(disc16, elas2d, 1, 4)
    f = mc.Forcing.from_config(2, {"plus": FORCE, "t_on": 0.02, "t_off": 0.05})
    box = P.boxes["+"]
    assert not f.sample(box, "+", 0.01).any()
    assert f.sample(box, "+", 0.03).any()
    assert not f.sample(box, "+", 0.05).any()


def test_zero_forcing_from_rest_stays_at_rest(disc16, elas2d):
    for gamma in (1, 3):
        tr = mc.solve_transient(problem(disc16, elas2d, gamma, 4), None, 0.05, 0.01)
        assert np.abs(tr.states[-1].y).max() == 0.0


def test_gamma1_F1_at_round_off(runs):
    for tr in runs[1]:
        assert max(d["F1_rel"] for d in tr.diagnostics[1:]) <= 1e-12


def test_gamma1_jump_refines_at_first_order(runs):
    jumps = [tr.diagnostics[-1]["jump_max"] for tr in runs[1]]
    assert jumps[0] > jumps[1] > jumps[2]
    orders = np.log2(np.array(jumps[:-1]) / np.array(jumps[1:]))
    assert orders.min() > 0.9


def test_gamma3_consistent_law_refines(runs):
    res = [tr.diagnostics[-1]["normal_residual"] for tr in runs[3]]
    orders = np.log2(np.array(res[:-1]) / np.array(res[1:]))
    assert orders.min() >= 0.8


def test_gamma3_K_form_identity(runs):
    # the consistent law and its K-form coincide once (K + L) e3 = 0
    for tr in runs[3]:
        d = tr.diagnostics[-1]
        assert d["K_form_gap"] <= 1e-9 * max(d["jump_prediction_max"], 1.0)


def test_mass_exchange(runs):
    for gamma in (1, 3):
        for tr in runs[gamma]:
            d = tr.diagnostics[-1]
            assert abs(d["sigma_flux"]) >= 1e-6
            assert d["flux_balance"] <= 1e-9
            assert d["normal_continuity"] == 0.0
            assert d["max_divergence"] <= 1e-9


def test_frozen_fluxes(runs):
    # forcing sin(pi x) e1 - sin(pi x) e3 in Omega^+ pushes fluid down through Sigma
    assert runs[1][0].diagnostics[-1]["sigma_flux"] == pytest.approx(0.02584813, rel=1e-6)
    assert runs[3][0].diagnostics[-1]["sigma_flux"] == pytest.approx(0.02458372, rel=1e-6)


@pytest.mark.parametrize("gamma", [1, 3])
def test_energy_decay_random_data(disc16, elas2d, gamma):
    P = problem(disc16, elas2d, gamma, 8)
    s0 = P.random_state(seed=gamma)
    tr = mc.solve_transient(P, None, 0.2, 0.01, initial=s0)
    E = tr.column("energy")
    assert E[0] > 0
    assert np.all(np.diff(E) <= 1e-12 * E[0])


def test_random_state_is_admissible(disc16, elas2d):
    P = problem(disc16, elas2d, 1, 8)
    s = P.random_state(seed=4)
    assert mc.sigma_fluxes(P, s)["max_divergence"] <= 1e-9


def test_trajectory_csv(tmp_path, runs):
    p = tmp_path / "traj.csv"
    cols = mc.write_trajectory_csv(p, runs[3][0])
    rows = list(csv.reader(p.open()))
    assert rows[0] == cols
    assert len(rows) == 1 + 11
    assert "deflection_max" in cols and "u3_max" not in cols
    assert float(rows[-1][cols.index("t")]) == pytest.approx(0.1)


def test_transient_time_grid(disc16, elas2d):
    with pytest.raises(ValueError):
        mc.solve_transient(problem(disc16, elas2d, 1, 4), None, 0.1, 0.03)


def test_zero_elastic_tensors_run(disc16):
    dom = geo.MacroDomain(2, (0,), (1,), 1.0, 4)
    P = mc.assemble_macro(dom, disc16.coeffs, ce.ElasticEffectiveTensors.zeros(2), 1,
                          freeze_displacement=True)
    tr = mc.solve_transient(P, mc.Forcing(2, FORCE), 0.05, 0.01)
    assert np.isfinite(tr.column("energy")).all()


def test_interface_gram_psd(disc16):
    S = mc.interface_gram(disc16.coeffs)
    ev = np.linalg.eigvalsh(0.5 * (S + S.T))
    assert ev.min() >= -1e-10 * np.abs(S).max()


def test_manufactured_spatial_order():
    e = [mc.solve_manufactured(n, 0.1, 0.1)[0] for n in (8, 16, 32)]
    orders = np.log2(np.array(e[:-1]) / np.array(e[1:]))
    assert orders.min() >= 1.8


def test_manufactured_temporal_order():
    # self-convergence in dt on a fixed grid
    n, T = 16, 0.2
    v = [mc.solve_manufactured(n, dt, T, "quadratic")[1] for dt in (0.04, 0.02, 0.01, 0.005)]
    d = [np.abs(v[i] - v[i + 1]).max() for i in range(3)]
    orders = np.log2(np.array(d[:-1]) / np.array(d[1:]))
    assert orders.min() >= 0.85


@settings(max_examples=10, deadline=None)
@given(scale=st.floats(0.1, 5.0), seed=st.integers(0, 1000))
def test_fluid_interface_form_nonnegative_random_traces(disc16, scale, seed):
    X = np.random.default_rng(seed).standard_normal((5, 6)) * scale
    S = mc.interface_gram(disc16.coeffs)
    q = np.einsum("qi,ij,qj->q", X, S, X)
    assert q.min() >= -1e-10 * np.abs(S).max() * scale ** 2


def test_coefficients_from_json_drive_the_same_run(disc16, elas2d):
    import json

    back = cs.FluidInterfaceCoefficients.from_dict(json.loads(cs.dumps(disc16.coeffs.as_dict())))
    dom = geo.MacroDomain(2, (0,), (1,), 1.0, 4)
    a = mc.solve_transient(mc.assemble_macro(dom, back, elas2d, 1), mc.Forcing(2, FORCE), 0.03, 0.01)
    b = mc.solve_transient(mc.assemble_macro(dom, disc16.coeffs, elas2d, 1), mc.Forcing(2, FORCE), 0.03, 0.01)
    assert np.allclose(a.states[-1].y, b.states[-1].y, rtol=1e-10, atol=1e-14)
