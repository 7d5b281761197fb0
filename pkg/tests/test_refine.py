import math
import warnings

import numpy as np
import pytest

from conftest import grid_mesh, icosphere
from octsdf.mesh import MeshError, TriangleMesh, marching_cubes
from octsdf.refine import (COT_MAX, COT_MIN, RefineConfig, cotan_laplacian, edge_energy, heatmap,
                           laplacian_displacement, mean_squared_laplacian, quadratic_form, refine, refine_step)


def weight(lap, i, j):
    return lap.matrix[i, j]


def angle(p, a, b):
    x, y = a - p, b - p
    return math.acos(np.clip(x @ y / (np.linalg.norm(x) * np.linalg.norm(y)), -1, 1))


def random_disc_mesh(n=50, seed=0):
    from scipy.spatial import Delaunay

    rng = np.random.default_rng(seed)
    xy = rng.uniform(-1, 1, size=(n, 2))
    tri = Delaunay(xy).simplices
    z = 0.2 * np.sin(2 * xy[:, 0]) * np.cos(3 * xy[:, 1]) + rng.normal(0, 0.02, n)
    return TriangleMesh(np.column_stack([xy, z]), tri)


def noisy_sphere(sigma=0.01, seed=0, subdivisions=3):
    v, f = icosphere(subdivisions)
    v = v + np.random.default_rng(seed).normal(0, sigma, v.shape)
    return TriangleMesh(v, f)


# --------------------------------------------------------------- weights


def test_equilateral_shared_edge():
    h = math.sqrt(3) / 2
    v = np.array([[0, 0, 0], [1, 0, 0], [0.5, h, 0], [0.5, -h, 0]])
    lap = cotan_laplacian(TriangleMesh(v, [[0, 1, 2], [1, 0, 3]]))
    assert weight(lap, 0, 1) == pytest.approx(1 / math.sqrt(3), abs=1e-12)
    # boundary edges carry the single opposite angle
    assert weight(lap, 0, 2) == pytest.approx(0.5 / math.sqrt(3), abs=1e-12)


def test_right_angles_clamp_to_floor():
    v = np.array([[0, 0, 0], [1, 1, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    lap = cotan_laplacian(TriangleMesh(v, [[0, 2, 1], [0, 1, 3]]))
    assert weight(lap, 0, 1) == COT_MIN


def test_needle_clamps_to_ceiling():
    v = np.array([[0, 0, 0], [1, 0, 0], [0.5, 1e-4, 0], [0.5, -1, 0]])
    lap = cotan_laplacian(TriangleMesh(v, [[0, 1, 2], [1, 0, 3]]))
    assert np.max(lap.weights) == COT_MAX


def test_brute_force_weights():
    mesh = random_disc_mesh()
    lap = cotan_laplacian(mesh, weight_clamp=(-np.inf, np.inf))
    v = mesh.vertices
    opposite = {}
    for tri in mesh.faces.tolist():
        for k in range(3):
            i, j, o = tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]
            opposite.setdefault((min(i, j), max(i, j)), []).append(o)
    assert len(opposite) == len(lap.edges)
    for (i, j), apexes in opposite.items():
        expected = 0.5 * sum(1 / math.tan(angle(v[o], v[i], v[j])) for o in apexes)
        assert abs(weight(lap, i, j) - expected) < 1e-9


def test_zero_area_face():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
    with pytest.raises(MeshError, match="zero-area"):
        cotan_laplacian(TriangleMesh(v, [[0, 1, 2]]))


@pytest.mark.parametrize("mesh", [random_disc_mesh(), noisy_sphere(subdivisions=2)], ids=["disc", "sphere"])
def test_rows_sum_to_zero_and_symmetric(mesh):
    m = cotan_laplacian(mesh).matrix
    assert np.abs(np.asarray(m.sum(axis=1))).max() < 1e-9
    assert abs(m - m.T).max() == 0


# --------------------------------------------------------- displacement


def test_flat_interior_has_zero_laplacian():
    v, f = grid_mesh(8)
    disp, norms = laplacian_displacement(cotan_laplacian(TriangleMesh(v, f)), v)
    interior = np.all((v[:, :2] > 1e-9) & (v[:, :2] < 1 - 1e-9), axis=1)
    assert norms[interior].max() < 1e-9


def test_displacement_grows_with_spike():
    v, f = grid_mesh(6)
    c = 3 * 7 + 3
    out = []
    for d in (0.01, 0.02, 0.04):
        w = v.copy()
        w[c, 2] = d
        out.append(laplacian_displacement(cotan_laplacian(TriangleMesh(w, f)), w)[1][c])
    assert out[0] < out[1] < out[2]


def test_dense_oracle():
    mesh = random_disc_mesh(30, seed=4)
    lap = cotan_laplacian(mesh)
    disp, norms = laplacian_displacement(lap, mesh.vertices)
    dense = lap.matrix.toarray() @ mesh.vertices
    assert np.abs(disp - dense).max() < 1e-12
    np.testing.assert_allclose(norms, np.linalg.norm(dense, axis=1), atol=1e-12)


def test_dimension_mismatch():
    lap = cotan_laplacian(random_disc_mesh(20))
    with pytest.raises(ValueError):
        laplacian_displacement(lap, np.zeros((5, 3)))


# ------------------------------------------------------------ quadratic form


def test_quadratic_form_identical_vertices():
    mesh = random_disc_mesh(20)
    lap = cotan_laplacian(mesh)
    assert quadratic_form(lap, np.ones((20, 3))) == pytest.approx(0.0, abs=1e-14)


def test_quadratic_form_single_edge():
    import scipy.sparse as sp

    from octsdf.refine import SparseLaplacian

    mat = sp.csr_matrix(np.array([[-1.0, 1.0], [1.0, -1.0]]))
    lap = SparseLaplacian(mat, np.array([[0, 1]]), np.array([1.0]), np.array([True]))
    v = np.array([[0, 0, 0], [0.3, 0.4, 0]])
    assert quadratic_form(lap, v) == pytest.approx(0.5 * 0.25, abs=1e-15)
    assert edge_energy(lap, v) == pytest.approx(0.125, abs=1e-15)


def test_quadratic_form_matches_edge_sum():
    mesh = noisy_sphere(0.05, subdivisions=2)
    lap = cotan_laplacian(mesh)
    assert abs(quadratic_form(lap, mesh.vertices) - edge_energy(lap, mesh.vertices)) < 1e-9


# ---------------------------------------------------------------- step


def test_flat_grid_is_fixed_point():
    v, f = grid_mesh(6)
    mesh = TriangleMesh(v, f)
    out = refine_step(mesh, cotan_laplacian(mesh))
    assert np.abs(out.vertices - v).max() < 1e-12


def test_eta_zero_is_identity():
    mesh = noisy_sphere()
    out = refine_step(mesh, cotan_laplacian(mesh), RefineConfig(eta=0.0))
    np.testing.assert_array_equal(out.vertices, mesh.vertices)


def test_spike_closed_form():
    v, f = grid_mesh(6)
    c = 3 * 7 + 3
    v[c, 2] = 0.05
    mesh = TriangleMesh(v, f)
    lap = cotan_laplacian(mesh)
    _, norms = laplacian_displacement(lap, v)
    out = refine_step(mesh, lap, RefineConfig(eta=0.5))
    # neighbours sit at z=0, so the centroid does too
    assert out.vertices[c, 2] == pytest.approx(0.05 * (1 - 0.5 * math.exp(-norms[c])), rel=1e-12)
    assert abs(out.vertices[c, 2]) < 0.05


def test_damping_bound():
    mesh = noisy_sphere(0.02, seed=3)
    lap = cotan_laplacian(mesh)
    eta = 0.5
    out = refine_step(mesh, lap, RefineConfig(eta=eta))
    moved = np.linalg.norm(out.vertices - mesh.vertices, axis=1)
    # recover the centroid from a full step
    full = refine_step(mesh, lap, RefineConfig(eta=0.999999))
    _, norms = laplacian_displacement(lap, mesh.vertices)
    gap = np.linalg.norm(full.vertices - mesh.vertices, axis=1) / (0.999999 * np.exp(-norms))
    assert np.all(moved <= eta * gap + 1e-15)
    assert np.all(moved < eta * gap)  # every vertex of a noisy sphere has |Lv| > 0


def test_boundary_and_sparse_vertices_frozen():
    mesh = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.3]], dtype=float), [[0, 1, 2]])
    out = refine_step(mesh, cotan_laplacian(mesh))
    np.testing.assert_array_equal(out.vertices, mesh.vertices)


def test_gradient_mode_moves_along_laplacian():
    mesh = noisy_sphere()
    lap = cotan_laplacian(mesh)
    disp, _ = laplacian_displacement(lap, mesh.vertices)
    out = refine_step(mesh, lap, RefineConfig(eta=0.1, mode="gradient"))
    np.testing.assert_allclose(out.vertices, mesh.vertices + 0.1 * disp, atol=1e-14)


def test_unweighted_centroid():
    v, f = grid_mesh(4)
    v[12, 2] = 0.1
    mesh = TriangleMesh(v, f)
    lap = cotan_laplacian(mesh)
    out = refine_step(mesh, lap, RefineConfig(eta=0.5, weighted=False))
    nb = sorted({int(j) for e in lap.edges if 12 in e for j in e} - {12})
    _, norms = laplacian_displacement(lap, v)
    target = v[nb].mean(axis=0)
    np.testing.assert_allclose(out.vertices[12], v[12] + 0.5 * math.exp(-norms[12]) * (target - v[12]), atol=1e-14)


@pytest.mark.parametrize("kw", [{"eta": 1.0}, {"eta": -0.1}, {"max_iters": -1}, {"mode": "explicit"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        RefineConfig(**kw)


# ---------------------------------------------------------------- loop


def test_zero_iterations_unchanged():
    mesh = noisy_sphere()
    out, rep = refine(mesh, RefineConfig(max_iters=0))
    np.testing.assert_array_equal(out.vertices, mesh.vertices)
    assert rep.iterations == 0 and len(rep.quadratic_form) == 1


def test_noisy_sphere_quadratic_form_decreases():
    mesh = noisy_sphere(0.01)
    out, rep = refine(mesh, RefineConfig(eta=0.5, max_iters=10, plateau_tol=-np.inf))
    q = np.array(rep.quadratic_form)
    assert rep.iterations == 10
    assert np.all(np.diff(q[:6]) < 0)
    np.testing.assert_array_equal(out.faces, mesh.faces)


@pytest.mark.parametrize("seed", range(5))
def test_small_eta_descent(seed):
    mesh = random_disc_mesh(60, seed=seed)
    lap = cotan_laplacian(mesh)
    out = refine_step(mesh, lap, RefineConfig(eta=0.1))
    assert edge_energy(lap, out.vertices) <= edge_energy(lap, mesh.vertices) + 1e-15


def test_faces_bit_identical_on_extracted_mesh():
    m = marching_cubes(lambda p: np.linalg.norm(p, axis=1) - 1, 0.1, np.array([[[-1.3] * 3, [1.3] * 3]]))
    out, rep = refine(m, RefineConfig(max_iters=5))
    assert out.faces.tobytes() == m.faces.tobytes()
    assert rep.quadratic_form[-1] < rep.quadratic_form[0]


def box_sdf(p):
    q = np.abs(p) - 0.5
    return np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)


def feature_dihedral(mesh, on_feature):
    """Median angle between normals of face pairs across edges of the original cube edges."""
    n = mesh.face_normals()
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    owner, angles = {}, []
    for fi, tri in enumerate(mesh.faces.tolist()):
        for k in range(3):
            i, j = sorted((tri[k], tri[(k + 1) % 3]))
            if not (on_feature[i] and on_feature[j]):
                continue
            if (i, j) in owner:
                angles.append(math.acos(np.clip(n[owner[(i, j)]] @ n[fi], -1, 1)))
            else:
                owner[(i, j)] = fi
    return math.degrees(np.median(angles))


@pytest.mark.parametrize("weighted,limit", [(True, 60.0), (False, 15.0)])
def test_cube_oversmoothing(weighted, limit):
    mesh = marching_cubes(box_sdf, 0.05, np.array([[[-0.7] * 3, [0.7] * 3]]))
    on_feature = np.sum(np.isclose(np.abs(mesh.vertices), 0.5, atol=0.03), axis=1) >= 2
    assert feature_dihedral(mesh, on_feature) == pytest.approx(90.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out, rep = refine(mesh, RefineConfig(eta=0.5, max_iters=200, plateau_tol=-np.inf, weighted=weighted))
    assert rep.iterations == 200
    # the right-angled cube edges are rounded off
    assert feature_dihedral(out, on_feature) < limit


def test_plateau_stops_early():
    mesh = noisy_sphere(0.01)
    _, rep = refine(mesh, RefineConfig(max_iters=100, plateau_tol=1e9))
    assert rep.stopped == "plateau" and rep.iterations == 3


def test_metric_callback_drives_stopping():
    mesh = noisy_sphere(0.01)
    calls = []

    def metric(m):
        calls.append(1)
        return 50.0

    _, rep = refine(mesh, RefineConfig(max_iters=20, plateau_tol=1e-4), metric)
    assert rep.stopped == "plateau" and len(calls) == 4
    assert rep.metric == [50.0] * 4


def test_degenerate_face_mid_refinement_warns():
    # a sliver whose apex collapses onto the base edge after one step
    v = np.array([[0, 0, 0], [1, 0, 0], [0.5, 0.5, 0], [0.5, -0.5, 0], [0.5, 0.0, 0.2]], dtype=float)
    f = [[0, 4, 2], [4, 1, 2], [0, 3, 4], [4, 3, 1]]
    mesh = TriangleMesh(v, f)
    from octsdf import refine as refine_mod

    def collapse(m, lap, cfg=None):
        w = m.vertices.copy()
        w[2] = [0.0, 0.0, 0.0] + 0.5 * (w[1] - w[0])
        w[4] = [0.75, 0.0, 0.0]
        return TriangleMesh(w, m.faces)

    orig = refine_mod.refine_step
    refine_mod.refine_step = collapse
    try:
        with pytest.warns(RuntimeWarning, match="stopped"):
            out, rep = refine(mesh, RefineConfig(max_iters=5))
    finally:
        refine_mod.refine_step = orig
    assert rep.stopped == "degenerate" and rep.iterations == 0
    np.testing.assert_array_equal(out.vertices, v)


def test_report_csv(tmp_path):
    _, rep = refine(noisy_sphere(), RefineConfig(max_iters=3, plateau_tol=-np.inf))
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "iter,quadratic_form,mean_disp_norm,metric"
    assert len(lines) == 5


def test_heatmap_and_msl():
    mesh = noisy_sphere()
    hm = heatmap(mesh)
    _, norms = laplacian_displacement(cotan_laplacian(mesh), mesh.vertices)
    np.testing.assert_array_equal(hm.scalars, norms)
    assert mean_squared_laplacian(mesh) == pytest.approx(np.mean(norms**2))


def test_empty_mesh():
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    out, rep = refine(empty)
    assert out.is_empty() and rep.stopped == "empty"
