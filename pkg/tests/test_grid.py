import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from memhomog import grid as gr
from memhomog import verify as vf
from memhomog.errors import LayoutError

from conftest import DISC, cell


def sym(E):
    return 0.5 * (E + E.T)


@pytest.fixture
def boxgrid():
    return gr.MacGrid((5, 7), 0.2, (False, False))


@pytest.fixture
def cellgrid():
    g = cell(DISC, 8)
    return g, gr.MacGrid(g.shape, g.h, g.periodic, origin=(0.0, -1.0))


def test_layout_sizes():
    g = gr.MacGrid((4, 6), 0.25, (True, False))
    assert g.comp_shapes == [(4, 8), (4, 7)]
    assert g.n_faces == 32 + 28
    v = np.arange(g.n_faces, dtype=float)
    assert g.comp(v, 1).shape == (4, 7)
    assert np.array_equal(g.full([g.comp(v, 0), g.comp(v, 1)]), v)


def test_divergence_of_affine_field_is_trace(boxgrid, rng):
    E = rng.standard_normal((2, 2))
    v = boxgrid.affine_field(E, c=[0.3, -1.0])
    assert np.allclose(boxgrid.divergence_matrix() @ v, np.trace(E), atol=1e-12)


def test_strain_of_affine_field_exact(boxgrid, rng):
    E = rng.standard_normal((2, 2))
    op = gr.StrainOperator(boxgrid)
    samples = op.unflatten(op.apply(boxgrid.affine_field(E)))
    S = sym(E)
    for (i, j), arr in samples.items():
        vals = arr[np.isfinite(arr)]
        assert np.allclose(vals, S[i, j], atol=1e-12), (i, j)


def test_strain_3d_affine_exact(rng):
    g = gr.MacGrid((3, 4, 5), 0.5, (False, False, False))
    E = rng.standard_normal((3, 3))
    op = gr.StrainOperator(g)
    for (i, j), arr in op.unflatten(op.apply(g.affine_field(E))).items():
        assert np.allclose(arr[np.isfinite(arr)], sym(E)[i, j], atol=1e-12)


def test_constant_strain_energy_is_volume_times_norm(rng):
    g = gr.MacGrid((4, 6), 0.25, (True, True))
    E = rng.standard_normal((2, 2))
    op = gr.StrainOperator(g)
    s = op.apply(np.zeros(g.n_faces), strain=E)
    vol = 4 * 6 * 0.25 ** 2
    assert s @ (op.weights("all") * s) == pytest.approx(vol * np.sum(sym(E) ** 2), rel=1e-13)


def test_weights_split_by_region(cellgrid):
    geom, g = cellgrid
    op = gr.StrainOperator(g, geom.solid)
    assert np.allclose(op.weights("fluid") + op.weights("solid"), op.weights("all"))
    with pytest.raises(ValueError):
        op.weights("membrane")


def test_summation_by_parts(boxgrid, rng):
    G = boxgrid.gradient_matrix()
    D = boxgrid.divergence_matrix()
    keep = np.abs(G).sum(axis=1).A.ravel() > 0
    v = rng.standard_normal(boxgrid.n_faces) * keep
    p = rng.standard_normal(boxgrid.n_cells)
    assert v @ (G @ p) == pytest.approx(-(p @ (D @ v)), rel=1e-12)


def test_face_mass_total(boxgrid):
    # every direction covers the box once (half cells at walls)
    m = boxgrid.face_mass()
    area = 5 * 7 * 0.2 ** 2
    for k in range(2):
        assert boxgrid.comp(m, k).sum() == pytest.approx(area)


def test_fd_checks_against_loop_stencils(cellgrid, rng):
    geom, g = cellgrid
    v = rng.standard_normal(g.n_faces)
    assert vf.fd_check("divergence", g, v) < 1e-13
    assert vf.fd_check("strain", g, v) < 1e-13
    assert vf.fd_check("strain", g, v, geom.solid) < 1e-13
    mesh = gr.Q1Mesh(geom.shape, geom.h, geom.periodic, geom.solid)
    assert vf.fd_check("q1_strain", mesh, rng.standard_normal(mesh.n_vertices * 2)) < 1e-13


def test_loop_gram_matches_energy_matrix(cellgrid, rng):
    geom, g = cellgrid
    F = rng.standard_normal((g.n_faces, 3))
    op = gr.StrainOperator(g, geom.solid)
    ref = F.T @ (op.energy_matrix("fluid") @ F)
    loop = vf.LoopStrain(g, geom.solid).gram(F, "fluid")
    assert np.allclose(loop, ref, rtol=1e-12, atol=1e-14 * np.abs(ref).max())


def test_q1_affine_strain_exact(rng):
    active = np.ones((3, 3, 4), dtype=bool)
    mesh = gr.Q1Mesh(active.shape, 0.5, (False, False, False), active)
    E = rng.standard_normal((3, 3))
    X = mesh.vertex_lattice_index() * mesh.h
    u = X @ E.T
    eps = mesh.strains(u)
    assert np.allclose(eps, sym(E), atol=1e-12)
    assert mesh.lumped_volume().sum() == pytest.approx(36 * 0.125)


def test_q1_periodic_identifies_vertices():
    active = np.ones((4, 6), dtype=bool)
    mesh = gr.Q1Mesh(active.shape, 0.25, (True, False), active)
    assert mesh.n_vertices == 4 * 7


def test_field_layout_errors(boxgrid):
    with pytest.raises(LayoutError):
        gr.CellField("velocity", np.zeros(3), boxgrid)
    with pytest.raises(LayoutError):
        gr.CellField("vorticity", np.zeros(3), boxgrid)
    with pytest.raises(LayoutError):
        gr.StrainOperator(boxgrid).apply(np.zeros(4))


def test_exports(tmp_path, boxgrid):
    p = tmp_path / "f.vtk"
    gr.export_vtk(p, boxgrid, {"pressure": np.arange(boxgrid.n_cells, dtype=float)})
    text = p.read_text()
    assert "CELL_DATA 35" in text and "pressure" in text
    c = tmp_path / "v.csv"
    gr.export_csv(c, np.array([[0.1, 1 / 3]]))
    rows = c.read_text().strip().splitlines()
    assert rows[0] == "index,value"
    assert [float(r.split(",")[1]) for r in rows[1:]] == [0.1, 1 / 3]


@settings(max_examples=30, deadline=None)
@given(v=arrays(np.float64, 5 * 10 + 6 * 9, elements=st.floats(-10, 10)))
def test_divergence_integrates_to_wall_flux(v):
    """Discrete divergence theorem on a 4x8 box: sum(div) h^2 equals the net outflow."""
    g = gr.MacGrid((4, 8), 0.125, (False, False))
    vx, vz = g.comp(v, 0), g.comp(v, 1)
    flux = g.h * (vx[-1, 1:-1].sum() - vx[0, 1:-1].sum() + vz[1:-1, -1].sum() - vz[1:-1, 0].sum())
    total = (g.divergence_matrix() @ v).sum() * g.h ** 2
    assert total == pytest.approx(flux, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_fluid_energy_is_nonnegative(seed):
    geom = cell(DISC, 8)
    g = gr.MacGrid(geom.shape, geom.h, geom.periodic)
    op = gr.StrainOperator(g, geom.solid)
    v = np.random.default_rng(seed).standard_normal(g.n_faces)
    s = op.apply(v)
    assert s @ (op.weights("fluid") * s) >= 0.0
