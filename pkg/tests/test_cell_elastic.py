import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memhomog import cell_elastic as ce
from memhomog import verify as vf
from memhomog.errors import FormatError, IncompleteSet, ShapeError

from conftest import BOX, cell

BAR = {"dim": 3, "shape": "box", "lo": [0, 0.25, -0.25], "hi": [1, 0.75, 0.25]}


def test_isotropic_symmetries(iso3):
    assert iso3.symmetry_defect() == 0.0
    # random probes bound the coercivity constant 2 mu from above
    assert iso3.validate() >= 2.0 - 1e-12


@pytest.mark.parametrize("lam,mu", [(2.0, 1.0), (0.3, 5.0), (-0.5, 1.0)])
def test_isotropic_is_valid_for_any_admissible_lame_pair(lam, mu):
    t = ce.MicroElasticTensor.isotropic(3, lam, mu)
    assert t.symmetry_defect() == 0.0
    assert t.validate() > 0


def test_voigt_roundtrip(iso3):
    lam, mu = 1.0, 1.0
    t = np.zeros((6, 6))
    t[:3, :3] = lam
    t[range(3), range(3)] = lam + 2 * mu
    t[range(3, 6), range(3, 6)] = mu
    assert np.array_equal(ce.MicroElasticTensor.from_voigt(3, t).C, iso3.C)
    upper = t[np.triu_indices(6)]
    assert np.array_equal(ce.MicroElasticTensor.from_voigt(3, upper).C, iso3.C)


def test_bad_tensors():
    t = np.eye(6)
    t[0, 1] = 1.0
    with pytest.raises(FormatError):
        ce.MicroElasticTensor.from_voigt(3, t)
    with pytest.raises(ShapeError):
        ce.MicroElasticTensor.from_voigt(3, np.eye(4))
    neg = ce.MicroElasticTensor.isotropic(3, 1.0, -1.0)
    with pytest.raises(ValueError, match="coercive"):
        neg.validate()


def test_reduce_micro_tensor(iso3):
    t2 = iso3.reduce_to_2d()
    assert np.array_equal(t2.C, ce.MicroElasticTensor.isotropic(2, 1.0, 1.0).C)


def test_index_vanishing(cross8):
    # entries of A* with a vertical index vanish
    _, tens = cross8
    A = tens.A_star
    scale = np.abs(A).max()
    mask = np.zeros(A.shape, dtype=bool)
    for ax in range(4):
        sl = [slice(None)] * 4
        sl[ax] = 2
        mask[tuple(sl)] = True
    assert np.abs(A[mask]).max() <= 1e-9 * scale


def test_astar_major_minor_symmetry(cross8):
    A = cross8[1].A_star
    assert np.allclose(A, A.transpose(2, 3, 0, 1), atol=1e-13)
    assert np.allclose(A, A.transpose(1, 0, 2, 3), atol=1e-13)


def test_energy_and_stress_forms_agree(cross8):
    sols, tens = cross8
    As = ce.assemble_Astar(sols, form="stress")
    assert np.abs(As - tens.A_star).max() <= 1e-9 * np.abs(tens.A_star).max()
    with pytest.raises(ValueError):
        ce.assemble_Astar(sols, form="average")


def test_cross_is_square_symmetric(cross8):
    A = cross8[1].A_star
    assert A[0, 0, 0, 0] == pytest.approx(A[1, 1, 1, 1], rel=1e-10)
    a, c = cross8[1].a, cross8[1].c
    assert a[0, 0, 0, 0] == pytest.approx(a[1, 1, 1, 1], rel=1e-10)
    assert c[0, 0, 0, 0] > 0


def test_plate_membrane_consistent(cross8):
    tens = cross8[1]
    assert np.allclose(tens.a * tens.solid_volume, tens.membrane(), atol=1e-12)


def test_cross_b_vanishes_by_symmetry(cross8):
    # the cross is symmetric about z = 0, so membrane and bending decouple
    tens = cross8[1]
    assert np.abs(tens.b).max() <= 1e-12 * np.abs(tens.c).max()


def test_frozen_cross8_values(cross8):
    A = cross8[1].A_star
    assert A[0, 0, 0, 0] == pytest.approx(0.71761, rel=1e-4)
    assert A[0, 1, 0, 1] == pytest.approx(0.15287, rel=1e-4)


def test_bar_uniaxial_stiffness_exact(iso3):
    # a bar along x with free side faces: A*_0000 = E * cross-section
    g = cell(BAR, 8)
    tens = ce.effective_tensors(ce.solve_elastic_cells(g, iso3, bending=False))
    E = 1.0 * (3 * 1.0 + 2 * 1.0) / (1.0 + 1.0)
    assert tens.A_star[0, 0, 0, 0] == pytest.approx(E * 0.25, rel=1e-12)
    assert abs(tens.A_star[1, 1, 1, 1]) < 1e-12


def test_floating_inclusion_has_no_stiffness(iso3):
    tens = ce.effective_tensors(ce.solve_elastic_cells(cell(BOX, 8), iso3, bending=False))
    assert np.abs(tens.membrane()).max() < 1e-12


def test_rigid_kernel_rotations(iso3):
    sols = ce.solve_elastic_cells(cell(BOX, 8), iso3, bending=False, which="inplane")
    # a floating box rotates freely in every plane
    assert len(sols.stats["kernel_rotations"]) == 3
    bar = ce.solve_elastic_cells(cell(BAR, 8), iso3, bending=False, which="inplane")
    # the bar wraps around x: only rotation about x survives
    assert bar.stats["kernel_rotations"] == [[1, 2]]


def test_missing_correctors(iso3):
    sols = ce.solve_elastic_cells(cell(BAR, 8), iso3, bending=False, which="inplane")
    with pytest.raises(IncompleteSet):
        sols.get("chiB", 0, 0)
    A = ce.assemble_Astar(sols)
    assert np.isnan(A[2, 2, 2, 2]) and np.isfinite(A[0, 0, 1, 1])


def test_dimension_mismatch(iso3):
    from conftest import DISC

    with pytest.raises(ShapeError):
        ce.ElasticCellSystem(cell(DISC, 8), iso3)
    per = ce.MicroElasticTensor(3, np.broadcast_to(iso3.C, (5, 3, 3, 3, 3)))
    with pytest.raises(ShapeError, match="per-voxel"):
        ce.ElasticCellSystem(cell(BAR, 8), per)


def test_per_voxel_tensor_matches_constant(iso3):
    g = cell(BAR, 8)
    per = ce.MicroElasticTensor(3, np.broadcast_to(iso3.C, (int(g.solid.sum()), 3, 3, 3, 3)).copy())
    a = ce.effective_tensors(ce.solve_elastic_cells(g, per, bending=False, which="inplane")).membrane()
    b = ce.effective_tensors(ce.solve_elastic_cells(g, iso3, bending=False, which="inplane")).membrane()
    assert np.allclose(a, b, atol=1e-13)


def test_reconstruction(cross8, rng):
    sols, _ = cross8
    E = rng.standard_normal((2, 2))
    E = E + E.T
    u1 = ce.reconstruct_u1(E, sols)
    expect = sum(E[i, j] * sols.get("chi", i, j) for i in range(2) for j in range(2))
    assert np.allclose(u1[0], expect)
    H = rng.standard_normal((3, 2, 2))
    assert ce.reconstruct_u2(E, H, sols).shape == (3, sols.system.mesh.n_vertices, 3)
    with pytest.raises(ShapeError):
        ce.reconstruct_u1(np.zeros((3, 3)), sols)


def test_tensor_document_roundtrip(cross8):
    sols, tens = cross8
    doc = ce.tensor_document(tens, sols.system.geom, sols.stats, 1e-10)
    back = ce.ElasticEffectiveTensors.from_dict(json.loads(json.dumps(doc))["tensors"])
    assert np.array_equal(back.A_star, tens.A_star)
    assert np.array_equal(back.c, tens.c)
    r = tens.reduce_to_2d()
    assert r.A_star.shape == (2,) * 4 and r.a.shape == (1,) * 4
    assert r.A_star[0, 0, 0, 0] == tens.A_star[0, 0, 0, 0]


def test_brute_force_oracle(cross8):
    sols, tens = cross8
    dev = vf.compare_with_brute_force(sols, tens, vf.ELASTIC_DEFS)
    assert max(dev.values()) <= 1e-12, dev


@settings(max_examples=20, deadline=None)
@given(lam=st.floats(0.1, 10.0), mu=st.floats(0.1, 10.0))
def test_astar_energy_is_positive(lam, mu):
    """The in-plane energy of the bar is nonnegative for every coercive isotropic tensor."""
    t = ce.MicroElasticTensor.isotropic(3, lam, mu)
    g = cell(BAR, 4)
    A = ce.effective_tensors(ce.solve_elastic_cells(g, t, bending=False, which="inplane")).membrane()
    M = A.reshape(4, 4)
    assert np.linalg.eigvalsh(0.5 * (M + M.T)).min() >= -1e-10 * np.abs(M).max()
    E = mu * (3 * lam + 2 * mu) / (lam + mu)
    assert A[0, 0, 0, 0] == pytest.approx(0.25 * E, rel=1e-10)
