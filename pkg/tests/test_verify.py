import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from memhomog import verify as vf
from memhomog.errors import NonMonotoneWarning, UnknownDefinition

from conftest import BOX2, DISC


def test_identity_suite_passes(disc16, ball8):
    for f in (disc16, ball8):
        rep = vf.identity_suite(f.coeffs, probes=200)
        assert rep.passed, rep.table()


def test_fault_injection_fails_exactly_L_sum(disc16):
    c = disc16.coeffs
    bad = c.replace(L_gamma=c.L_gamma + 1e-3)
    rep = vf.identity_suite(bad, probes=200)
    assert rep.failed() == ["L_sum"]


def test_report_serialisation(disc16):
    rep = vf.identity_suite(disc16.coeffs, probes=50)
    doc = json.loads(rep.to_json())
    assert doc["passed"] is True
    assert {ch["name"] for ch in doc["checks"]} >= {"L_sum", "gram_psd", "gram_equal_triples"}
    assert "L_sum" in rep.table()


def test_form_fallback_without_gram(disc16):
    from memhomog.cell_stokes import FluidInterfaceCoefficients

    c = FluidInterfaceCoefficients.from_dict(disc16.coeffs.as_dict())
    rep = vf.identity_suite(c, probes=100)
    assert rep.passed
    assert any(ch.name.startswith("form_") for ch in rep.checks)


def test_fluid_brute_force(disc16, ball8):
    for f in (disc16, ball8):
        dev = vf.compare_with_brute_force(f.sols, f.coeffs, vf.FLUID_DEFS)
        assert set(dev) == set(vf.FLUID_DEFS)
        assert max(dev.values()) <= 1e-12, dev


def test_unknown_definition(disc16):
    with pytest.raises(UnknownDefinition):
        vf.brute_force_coefficient(disc16.sols, "Q++")
    with pytest.raises(UnknownDefinition):
        vf.fd_check("curl", None)
    with pytest.raises(UnknownDefinition):
        vf.parse_selector("L_gamma[0,")


def test_elastic_identity_suite(cross8):
    rep = vf.elastic_identity_suite(*cross8)
    assert rep.passed, rep.table()
    names = {ch.name for ch in rep.checks}
    assert "A_star_index2_vanishing" in names


def test_parse_selector():
    assert vf.parse_selector("L_gamma[0,0]") == ("L_gamma", (0, 0))
    assert vf.parse_selector("B+-[1, 0]") == ("B+-", (1, 0))
    assert vf.parse_selector("completeness") == ("completeness", ())


def test_convergence_exact_power_law():
    row = vf.convergence_table("q", [8, 16, 32, 64], [1 + 8.0 ** -2, 1 + 16.0 ** -2, 1 + 32.0 ** -2, 1 + 64.0 ** -2])
    assert row.orders == pytest.approx([2.0, 2.0])
    assert row.limit == pytest.approx(1.0, abs=1e-14)
    assert row.limit_range is None


def test_convergence_converged_at_coarsest():
    row = vf.convergence_table("A", [8, 16, 32], [0.625, 0.625, 0.625])
    assert row.note == "converged at the coarsest resolution"
    assert row.limit == 0.625


def test_convergence_round_off_floor():
    # entries at round-off of a large tensor are not a convergence signal
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        row = vf.convergence_table("A[2,2]", [8, 16, 32], [1e-24, -3e-24, 2e-24], scale=0.6)
    assert row.note.startswith("converged")


def test_convergence_unstable_reports_range():
    vals = [1.351649, 1.329392, 1.332841]
    with pytest.warns(NonMonotoneWarning):
        row = vf.convergence_table("L", [12, 24, 48], [1.0, 1.1, 0.9])
    assert row.limit_range is not None
    with pytest.warns(NonMonotoneWarning):
        row = vf.convergence_table("L", [16, 32, 64], vals)
    assert row.orders[0] == pytest.approx(2.69, abs=0.01)
    with pytest.raises(ValueError):
        vf.convergence_table("L", [16, 16, 32], vals)


def test_convergence_unequal_ratios():
    # 3D ball L_gamma[0,0] at 16/24/32 (derived with the package solvers)
    row = vf.convergence_table("L", [16, 24, 32], [1.1756137344361441, 1.170926232185867, 1.1685155727660872])
    assert row.orders[0] == pytest.approx(0.920, abs=1e-3)
    assert row.limit == pytest.approx(1.16056, rel=1e-5)


# L_gamma[0,0] of the radius-0.3 obstacle at resolutions 16/32/64, derived with
# the package solvers (the 3D 64 run takes about 80 min on one core)
BAND_DATA = {
    "ball3d": [1.1756137344361441, 1.1685155727660872, 1.1710367285161793],
    "disc2d": [1.351649, 1.329392, 1.332841],
}


@pytest.mark.xfail(strict=True, reason="voxelised obstacle: the 16/32/64 sequence oscillates, "
                                        "so there is no asymptotic order; see the decisions ledger")
@pytest.mark.parametrize("case", sorted(BAND_DATA))
def test_L_gamma_order_band(case):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonMonotoneWarning)
        row = vf.convergence_table("L_gamma[0,0]", [16, 32, 64], BAND_DATA[case])
    assert "oscillatory" not in row.note
    assert 0.8 <= row.orders[0] <= 2.2


def test_oscillating_sequence_reported():
    vals = BAND_DATA["ball3d"]
    with pytest.warns(NonMonotoneWarning, match="change sign"):
        row = vf.convergence_table("L", [16, 32, 64], vals)
    assert row.limit is None
    assert row.limit_range == (vals[1], vals[2])


def test_refinement_study_and_table():
    rows = vf.refinement_study(BOX2, [8, 16, 32], ["L_gamma[0,0]", "completeness"])
    assert [r.name for r in rows] == ["L_gamma[0,0]", "completeness"]
    assert rows[1].limit is not None and abs(rows[1].limit) < 1e-9
    text = vf.format_table(rows)
    assert "L_gamma[0,0]" in text and "limit" in text


def test_disc_refinement_values():
    q = vf.evaluate_quantities(DISC, 16, ["L_gamma[0,0]", "B++[0,0]"])
    assert q["L_gamma[0,0]"] == pytest.approx(1.351649, rel=1e-6)
    assert q["B++[0,0]"] == pytest.approx(0.675734, rel=1e-6)


@settings(max_examples=50, deadline=None)
@given(p=st.floats(0.5, 4.0), C=st.floats(-5, 5), L=st.floats(-3, 3),
       base=st.sampled_from([4, 6, 8, 10]), ratio=st.sampled_from([(2, 2), (1.5, 4 / 3), (2, 1.5)]))
def test_convergence_recovers_power_law(p, C, L, base, ratio):
    """For values L + C h^p the observed order is p and the limit is L."""
    assume(abs(C) > 1e-3)
    res = [base, base * ratio[0], base * ratio[0] * ratio[1]]
    assume(all(abs(r - round(r)) < 1e-12 for r in res))
    res = [int(round(r)) for r in res]
    vals = [L + C * (1.0 / n) ** p for n in res]
    row = vf.convergence_table("q", res, vals, scale=1.0)
    assert row.orders[0] == pytest.approx(p, rel=1e-6)
    assert row.limit == pytest.approx(L, abs=1e-8 * max(1.0, abs(C)))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_interface_form_psd_property(disc16, seed):
    """Random triples give a nonnegative form; equal triples give zero."""
    S = disc16.coeffs.gram
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((50, 6))
    q = vf.interface_form(S, X)
    scale = np.abs(S).max()
    assert q.min() >= -1e-9 * scale * np.abs(X).max() ** 2
    w = rng.standard_normal((20, 2))
    eq = vf.interface_form(S, np.tile(w, 3))
    assert np.abs(eq).max() <= 1e-9 * scale * max(1.0, np.abs(w).max() ** 2)


def test_fd_check_values_are_relative():
    assert math.isfinite(vf._rel(np.ones(3), np.ones(3)))
    assert vf._rel(np.zeros(3), np.zeros(3)) == 0.0
