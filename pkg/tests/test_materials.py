import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fe2rom.materials import (CreepParams, ElasticParams, J2LinearHardening,
                              J2LinearParams, J2PowerLawHardening,
                              LinearElastic, MaterialState, PowerLawParams,
                              StrainHardeningCreep, creep_increment,
                              creep_under_constant_stress, elastic_stress,
                              equivalent_stress, j2_return_map, make_material,
                              powerlaw_return_map, uniaxial_plane_strain)

EL = ElasticParams(1.0, 0.3)
J2 = J2LinearParams(EL, 0.01, 0.016)
PL = PowerLawParams(1.01, 0.29, 0.72 * 0.01, 0.08)
CREEP = CreepParams(1.0, 0.3, 22.09, 1.06, -0.56)

MODELS = {
    'j2': (J2LinearHardening(J2), None),
    'powerlaw': (J2PowerLawHardening(PL), None),
    'creep': (StrainHardeningCreep(CREEP), 0.5),
}


def test_elastic_zero_strain():
    s, C = elastic_stress(EL, np.zeros(3))
    assert np.all(s == 0.0)
    np.testing.assert_allclose(C, C.T, atol=0)
    assert np.all(np.linalg.eigvalsh(C) > 0)


def test_elastic_decoupled_without_poisson():
    s, _ = elastic_stress(ElasticParams(1.0, 0.0), [1.0, 0.0, 0.0])
    np.testing.assert_allclose(s, [1.0, 0.0, 0.0], atol=1e-15)


def test_elastic_plane_strain_closed_form():
    E, nu = 1.0, 0.3
    s, _ = elastic_stress(EL, [0.01, 0.0, 0.0])
    expected = E * (1 - nu) / ((1 + nu) * (1 - 2 * nu)) * 0.01
    assert s[0] == pytest.approx(expected, rel=1e-14)
    assert s[1] == pytest.approx(E * nu / ((1 + nu) * (1 - 2 * nu)) * 0.01,
                                 rel=1e-14)


def test_parameter_validation():
    with pytest.raises(ValueError):
        ElasticParams(-1.0, 0.3)
    with pytest.raises(ValueError):
        ElasticParams(1.0, 0.5)
    with pytest.raises(ValueError):
        J2LinearParams(EL, 0.0, 0.1)
    with pytest.raises(ValueError):
        PowerLawParams(1.0, 0.3, 0.01, 1.0)
    with pytest.raises(ValueError):
        CreepParams(1.0, 0.3, 1.0, 1.0, -1.0)
    with pytest.raises(TypeError):
        make_material(object())


def test_j2_elastic_step_keeps_state():
    sig, C, st = j2_return_map(J2, None, [0.001, -0.0005, 0.002])
    np.testing.assert_allclose(C, EL.plane_strain_matrix(), atol=1e-15)
    assert st.eqv[0] == 0.0
    assert np.all(st.plastic_strain == 0.0)


def test_j2_uniaxial_strain_on_hardening_line():
    state = None
    for e in np.linspace(0.005, 0.05, 10):
        d = np.array([e, 0.0, 0.0]) - (0 if state is None else
                                       state.strain[0])
        sig, _, state = j2_return_map(J2, state, d)
    q = equivalent_stress(sig, state.stress33[0])
    assert state.eqv[0] > 0.0
    assert q == pytest.approx(J2.sigma_y0 + J2.h * state.eqv[0], rel=1e-12)


def test_j2_reverse_step_is_elastic_with_residual_strain():
    d = np.array([0.02, 0.0, 0.0])
    s1, _, st1 = j2_return_map(J2, None, d)
    s2, _, st2 = j2_return_map(J2, st1, -d)
    assert st1.eqv[0] > 0
    assert st2.eqv[0] == st1.eqv[0]
    np.testing.assert_array_equal(st2.plastic_strain, st1.plastic_strain)
    np.testing.assert_allclose(s2, s1 - EL.plane_strain_matrix() @ d,
                               atol=1e-15)
    assert np.abs(s2).max() > 1e-4        # residual stress from eps_p


def test_powerlaw_zero_increment_is_identity():
    s, _, st = powerlaw_return_map(PL, None, [0.0, 0.0, 0.0])
    assert np.all(s == 0.0) and st.eqv[0] == 0.0


def test_powerlaw_small_exponent_is_perfect_plasticity():
    p = PowerLawParams(1.0, 0.3, 0.01, 1e-9)
    sig, _, st = powerlaw_return_map(p, None, [0.05, -0.02, 0.03])
    q = equivalent_stress(sig, st.stress33[0])
    assert q == pytest.approx(0.01, rel=1e-6)


def test_powerlaw_hardening_curve_monotone_concave():
    e11 = np.linspace(0.0, 0.05, 51)[1:]
    s11, _ = uniaxial_plane_strain(J2PowerLawHardening(PL), e11)
    ds = np.diff(s11)
    assert np.all(ds > 0)
    assert np.all(np.diff(ds) <= 1e-12)


def test_creep_zero_stress_unchanged():
    sig, _, st = creep_increment(CREEP, None, np.zeros(3), 10.0)
    assert np.all(sig == 0.0) and st.eqv[0] == 0.0


def test_creep_needs_time_increment():
    with pytest.raises(ValueError):
        StrainHardeningCreep(CREEP).update(np.zeros((1, 3)),
                                           MaterialState.zeros(1), None)


def test_creep_norton_limit_ignores_hardening_variable():
    mat = StrainHardeningCreep(CreepParams(1.0, 0.3, 5.0, 2.0, 0.0))
    q = np.array([0.1, 0.1])
    phi, _, _ = mat.rate(q, np.array([1e-6, 0.3]))
    assert phi[0] == phi[1]


def test_creep_constant_stress_matches_strain_hardening_solution():
    sigma, T = 0.5, 1.0
    times = np.linspace(0.0, T, 101)
    eqv = creep_under_constant_stress(CREEP, sigma, times)
    p = CREEP
    exact = (sigma / p.A) ** p.n * T ** (p.m + 1) / (p.m + 1)
    assert abs(eqv[-1] - exact) / exact < 0.01
    assert np.all(np.diff(eqv) >= 0)


# ---------------------------------------------------------------------------
# Consistent tangents
# ---------------------------------------------------------------------------
def _random_states(model, dt, n, rng):
    """Random histories: one random (mostly plastic) prior step."""
    prior = rng.normal(scale=0.02, size=(n, 3))
    _, _, st = model.update(prior, MaterialState.zeros(n), dt)
    eps = prior + rng.normal(scale=0.01, size=(n, 3))
    return eps, st


def _fd_tangent(model, eps, state, dt, h=1e-6):
    n = len(eps)
    C = np.empty((n, 3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        sp, _, _ = model.update(eps + e, state, dt)
        sm, _, _ = model.update(eps - e, state, dt)
        C[:, :, j] = (sp - sm) / (2 * h)
    return C


@pytest.mark.parametrize('name', sorted(MODELS))
def test_tangent_matches_finite_differences(name, rng):
    model, dt = MODELS[name]
    eps, st = _random_states(model, dt, 120, rng)
    _, C, new = model.update(eps, st, dt)
    assert np.mean(new.eqv > st.eqv) > 0.5      # mostly inelastic steps
    Cfd = _fd_tangent(model, eps, st, dt)
    scale = np.abs(C).max(axis=(1, 2))[:, None, None]
    assert np.max(np.abs(C - Cfd) / scale) <= 1e-6


# ---------------------------------------------------------------------------
# Properties along random strain paths
# ---------------------------------------------------------------------------
strain_path = st.lists(st.lists(st.floats(-0.03, 0.03), min_size=3,
                                max_size=3), min_size=2, max_size=6)


@settings(max_examples=40, deadline=None)
@given(strain_path, st.sampled_from(sorted(MODELS)))
def test_flow_is_deviatoric_dissipative_and_monotone(path, name):
    model, dt = MODELS[name]
    state = MaterialState.zeros(1)
    for eps in path:
        sig, _, new = model.update(np.array([eps]), state, dt)
        dep = new.plastic_strain[0] - state.plastic_strain[0]
        assert abs(dep[:3].sum()) <= 1e-10
        s_t = np.array([sig[0, 0], sig[0, 1], new.stress33[0], sig[0, 2]])
        work = s_t[:3] @ dep[:3] + 2 * s_t[3] * dep[3]
        assert work >= -1e-12
        assert new.eqv[0] >= state.eqv[0]
        state = new


def test_linear_elastic_update_matches_hooke(rng):
    eps = rng.normal(size=(5, 3))
    s, C, _ = LinearElastic(EL).update(eps, MaterialState.zeros(5))
    np.testing.assert_allclose(s, eps @ EL.plane_strain_matrix().T,
                               atol=1e-14)
