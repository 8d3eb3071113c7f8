import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fe2rom.materials import J2LinearHardening, LinearElastic
from fe2rom.mesh import MATRIX, homogeneous_rve_mesh
from fe2rom.rve import (NonConvergenceError, Rve, SnapshotRecorder,
                        monotonic_path, run_trajectory, solve_mixed, step_dt)

from conftest import MATRIX_ELASTIC, MATRIX_J2, desk_materials

E_PLASTIC = np.array([0.02, -0.005, 0.01])


def fd_tangent(rve, E, state, w0, h=1e-6, tol=1e-13):
    C = np.zeros((3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        sp = rve.solve(E + e, state, w0=w0, tol=tol, max_iter=40).stress
        sm = rve.solve(E - e, state, w0=w0, tol=tol, max_iter=40).stress
        C[:, j] = (sp - sm) / (2 * h)
    return C


def ip_energy(rve, res, E):
    eps = rve.strains(E, res.w)
    return rve.weights @ np.einsum('ij,ij->i', res.ip_stress, eps) / rve.volume


def test_zero_strain_gives_zero_field(coarse_rve):
    res = coarse_rve.solve(np.zeros(3), coarse_rve.initial_state())
    assert res.iterations == 0
    assert np.all(res.stress == 0.0)


def test_elastic_converges_in_one_iteration(elastic_rve):
    res = elastic_rve.solve([0.01, -0.003, 0.02],
                            elastic_rve.initial_state(), tol=1e-10)
    assert res.iterations == 1


def test_plastic_newton_converges_quadratically(coarse_rve):
    res = coarse_rve.solve(E_PLASTIC, coarse_rve.initial_state(), tol=1e-12,
                           max_iter=40)
    r = np.array(res.residuals) / res.residuals[0]
    # r_{k+1} / r_k^2 stays bounded once in the asymptotic range and above
    # the round-off floor
    tail = [(a, b) for a, b in zip(r[:-1], r[1:]) if a < 1e-3 and b > 1e-13]
    assert tail
    assert all(b <= 100 * a ** 2 for a, b in tail)


@pytest.mark.parametrize('E', [np.array([0.002, -0.001, 0.001]), E_PLASTIC])
def test_condensed_tangent_matches_finite_differences(coarse_rve, E):
    st0 = coarse_rve.initial_state()
    res = coarse_rve.solve(E, st0, tol=1e-13, max_iter=40)
    C = fd_tangent(coarse_rve, E, st0, res.w)
    assert np.abs(C - res.tangent).max() / np.abs(C).max() <= 1e-5


def test_macro_stress_equals_boundary_traction_average(coarse_rve):
    st0 = coarse_rve.initial_state()
    res = coarse_rve.solve(E_PLASTIC, st0, tol=1e-12, max_iter=40)
    T = coarse_rve.boundary_traction_average(E_PLASTIC, res.w, st0)
    np.testing.assert_allclose(T, res.stress, rtol=0,
                               atol=1e-9 * np.abs(res.stress).max())


@settings(max_examples=10, deadline=None)
@given(st.lists(st.floats(-0.03, 0.03), min_size=3, max_size=3))
def test_hill_mandel(coarse_rve, E):
    E = np.array(E)
    res = coarse_rve.solve(E, coarse_rve.initial_state(), tol=1e-12,
                           max_iter=40)
    assert ip_energy(coarse_rve, res, E) == pytest.approx(
        res.stress @ E, rel=1e-8, abs=1e-14)


def test_linear_bc_stiffer_than_periodic(coarse_mesh):
    mats = {k: LinearElastic(m.elastic) for k, m in desk_materials().items()}
    lin = Rve(coarse_mesh, mats, 'linear')
    per = Rve(coarse_mesh, mats, 'periodic')
    for E in np.eye(3) * 0.01:
        a = lin.solve(E, lin.initial_state()).stress @ E
        b = per.solve(E, per.initial_state()).stress @ E
        assert a >= b * (1 - 1e-12)


@pytest.mark.parametrize('bc', ['linear', 'periodic'])
def test_homogeneous_cell_reproduces_material_point(bc):
    mat = J2LinearHardening(MATRIX_J2)
    rve = Rve(homogeneous_rve_mesh(3), {MATRIX: mat}, bc)
    res = rve.solve(E_PLASTIC, rve.initial_state())
    sig, C, _ = mat.update(E_PLASTIC[None], mat_state(1))
    np.testing.assert_allclose(res.stress, sig[0], atol=1e-13)
    np.testing.assert_allclose(res.tangent, C[0], atol=1e-12)
    assert np.abs(res.w).max() < 1e-12


def mat_state(n):
    from fe2rom.materials import MaterialState
    return MaterialState.zeros(n)


def test_solve_is_deterministic(coarse_rve):
    st0 = coarse_rve.initial_state()
    a = coarse_rve.solve(E_PLASTIC, st0)
    b = coarse_rve.solve(E_PLASTIC, st0)
    np.testing.assert_array_equal(a.w, b.w)
    np.testing.assert_array_equal(a.tangent, b.tangent)


def test_solve_does_not_modify_input_state(coarse_rve):
    st0 = coarse_rve.initial_state()
    coarse_rve.solve(E_PLASTIC, st0)
    assert np.all(st0.eqv == 0.0)


def test_nonconvergence_is_reported(coarse_rve):
    with pytest.raises(NonConvergenceError) as exc:
        coarse_rve.solve(E_PLASTIC, coarse_rve.initial_state(), max_iter=1)
    assert exc.value.residual > 0


def test_missing_material_rejected(coarse_mesh):
    with pytest.raises(ValueError):
        Rve(coarse_mesh, {MATRIX: LinearElastic(MATRIX_ELASTIC)})


def test_elastic_snapshots_have_rank_three(elastic_rve):
    rec = SnapshotRecorder()
    for i, E in enumerate(([0.01, 0, 0], [0, 0.01, 0], [0, 0, 0.01],
                           [0.01, -0.02, 0.005])):
        run_trajectory(elastic_rve, monotonic_path(E, 4), rec, i)
    X = rec.matrix_u()
    assert X.shape == (elastic_rve.n_dofs, 16)
    s = np.linalg.svd(X, compute_uv=False)
    assert np.sum(s > 1e-10 * s[0]) == 3
    assert rec.manifest[4] == (1, 1, 0.25)


def test_trajectory_records_one_column_per_step(coarse_rve):
    rec, results = run_trajectory(coarse_rve, monotonic_path(E_PLASTIC, 5))
    assert rec.n_snapshots == 5 == len(results)
    assert [m[2] for m in rec.manifest] == [0.2, 0.4, 0.6, 0.8, 1.0]
    np.testing.assert_array_equal(rec.matrix_u()[:, -1], results[-1].w)


def test_mixed_control_enforces_stress(coarse_rve):
    E, res = solve_mixed(coarse_rve, [0.02, 0.0, 0.0], [True, False, False],
                         np.zeros(3), coarse_rve.initial_state())
    assert E[0] == 0.02
    assert np.abs(res.stress[1:]).max() <= 1e-7 * np.abs(res.stress[0])
    assert E[1] < 0


def test_step_dt():
    assert step_dt(None, 3) is None
    assert step_dt(0.5, 3) == 0.5
    assert step_dt([0.1, 0.2], 1) == 0.2
