from math import factorial

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fe2rom.mesh import (INCLUSION, MATRIX, TRI3_RULE, Circle, DofMap,
                         GeometryError, InvertedElementError, MeshError,
                         REFERENCE_NODES, RveGeometry, build_beam_mesh,
                         build_rve_mesh, fixed_dofs, read_mesh, shape_eval,
                         shape_functions, write_mesh)

coord = st.floats(0.0, 1.0)


def test_rule_weights_sum_to_reference_area():
    assert TRI3_RULE.weights.sum() == pytest.approx(0.5, abs=1e-15)
    assert np.all(TRI3_RULE.weights > 0)


@pytest.mark.parametrize('p,q', [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1),
                                 (0, 2)])
def test_rule_integrates_quadratics_exactly(p, q):
    # int_T xi^p eta^q = p! q! / (p + q + 2)!
    exact = factorial(p) * factorial(q) / factorial(p + q + 2)
    pts = TRI3_RULE.points
    val = TRI3_RULE.weights @ (pts[:, 0] ** p * pts[:, 1] ** q)
    assert val == pytest.approx(exact, rel=1e-14)


def test_shape_functions_interpolate_nodes():
    N, _ = shape_functions(REFERENCE_NODES[:, 0], REFERENCE_NODES[:, 1])
    np.testing.assert_allclose(N, np.eye(6), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(coord, coord)
def test_partition_of_unity(a, b):
    xi, eta = a * (1 - b), b
    N, dN = shape_functions(xi, eta)
    assert abs(N.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(dN.sum(axis=0), 0.0, atol=1e-12)


def _distorted_element(rng):
    X = REFERENCE_NODES * [2.0, 1.5] + [0.3, -0.2]
    X[3:] += rng.uniform(-0.05, 0.05, size=(3, 2))
    return X


def test_rigid_translation_gives_zero_strain(rng):
    X = _distorted_element(rng)
    _, B, _ = shape_eval(X, (0.2, 0.3))
    u = np.tile([0.7, -1.3], 6)
    np.testing.assert_allclose(B @ u, 0.0, atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=6, max_size=6), coord, coord)
def test_patch_test_affine_field(c, a, b):
    X = _distorted_element(np.random.default_rng(3))
    G = np.array([[c[0], c[1]], [c[2], c[3]]])
    u = (X @ G.T + [c[4], c[5]]).reshape(-1)
    _, B, _ = shape_eval(X, (a * (1 - b), b))
    expected = [G[0, 0], G[1, 1], G[0, 1] + G[1, 0]]
    np.testing.assert_allclose(B @ u, expected, atol=1e-10)


def test_linear_field_x():
    X = _distorted_element(np.random.default_rng(5))
    u = np.zeros(12)
    u[0::2] = X[:, 0]
    _, B, _ = shape_eval(X, (1 / 3, 1 / 3))
    np.testing.assert_allclose(B @ u, [1.0, 0.0, 0.0], atol=1e-12)


def test_inverted_element_rejected():
    X = REFERENCE_NODES[[0, 2, 1, 5, 4, 3]]
    with pytest.raises(InvertedElementError):
        shape_eval(X, (0.2, 0.2))
    with pytest.raises(ValueError):
        shape_eval(REFERENCE_NODES, (0.8, 0.8))


def test_beam_counts():
    m = build_beam_mesh(4.0, 1.0, 4, 1)
    assert m.n_elements == 8
    assert m.volume == pytest.approx(4.0, rel=1e-14)
    single = build_beam_mesh(1.0, 1.0, 1, 1)
    assert single.n_elements == 2 and single.n_nodes == 9


@pytest.mark.parametrize('nx,ny', [(1, 1), (4, 1), (8, 2), (3, 5)])
def test_left_set_dof_count(nx, ny):
    m = build_beam_mesh(4.0, 1.0, nx, ny)
    assert len(fixed_dofs(m, 'left')) == 2 * (2 * ny + 1)


def test_beam_rejects_bad_parameters():
    with pytest.raises(ValueError):
        build_beam_mesh(4.0, 1.0, 0, 1)


def test_empty_unit_cell_area():
    m = build_rve_mesh(RveGeometry((), (), 0.5))
    assert m.volume == pytest.approx(1.0, rel=1e-14)
    assert np.all(m.material_ids == MATRIX)


def test_default_cell_area_and_materials():
    m = build_rve_mesh(level='medium')
    exact = 1.0 - np.pi * 0.15 ** 2
    assert abs(m.volume - exact) / exact < 0.02
    assert set(np.unique(m.material_ids)) == {MATRIX, INCLUSION}
    # no element centroid inside the pore
    c = m.nodes[m.elements[:, :3]].mean(axis=1)
    assert np.all(np.hypot(c[:, 0] - 0.7, c[:, 1] - 0.22) >= 0.15 - 1e-12)
    assert np.sum(m.element_areas()) == pytest.approx(m.volume, rel=1e-10)


def test_refinement_increases_point_count():
    counts = [build_rve_mesh(level=lv).n_integration_points
              for lv in ('coarse', 'medium', 'fine')]
    assert counts[0] < counts[1] < counts[2]


def test_positive_jacobians(coarse_mesh):
    _, w, _, _ = coarse_mesh.geometry()
    assert np.all(w > 0)


@pytest.mark.parametrize('geom', [
    RveGeometry((Circle(0.3, 0.3, 0.2), Circle(0.45, 0.3, 0.2)), ()),
    RveGeometry((Circle(0.1, 0.5, 0.2),), ()),
])
def test_invalid_geometry(geom):
    with pytest.raises(GeometryError):
        build_rve_mesh(geom)


def test_mesh_round_trip_is_exact(tmp_path, coarse_mesh):
    path = tmp_path / 'cell.mesh'
    write_mesh(coarse_mesh, path)
    back = read_mesh(path)
    assert np.array_equal(back.nodes, coarse_mesh.nodes)
    assert np.array_equal(back.elements, coarse_mesh.elements)
    assert np.array_equal(back.material_ids, coarse_mesh.material_ids)
    for k, v in coarse_mesh.node_sets.items():
        assert np.array_equal(back.node_sets[k], v)
    write_mesh(back, tmp_path / 'again.mesh')
    assert (tmp_path / 'again.mesh').read_bytes() == path.read_bytes()


def test_read_mesh_rejects_foreign_file(tmp_path):
    p = tmp_path / 'x.mesh'
    p.write_text("hello 1 2 3\n")
    with pytest.raises(MeshError):
        read_mesh(p)


def test_dofmap_partition():
    dm = DofMap(10, [0, 3, 4], [0.0, 1.0, 2.0])
    assert set(dm.free) | {0, 3, 4} == set(range(10))
    assert not set(dm.free) & {0, 3, 4}
    np.testing.assert_allclose(dm.values(0.5), [0.0, 0.5, 1.0])
    with pytest.raises(MeshError):
        DofMap(4, [1, 1], [0.0, 0.0])
