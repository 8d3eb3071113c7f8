"""Small-strain constitutive models with algorithmically consistent tangents.

All models work on batches of material points. Internally the symmetric
tensors are kept in Mandel notation ``(11, 22, 33, sqrt(2)*12)`` so that the
out-of-plane component is carried under plane strain; the element level sees
engineering Voigt vectors ``(eps11, eps22, gamma12)``.

Models
------
LinearElastic
    Isotropic Hooke law.
J2LinearHardening
    von Mises plasticity, linear isotropic hardening (closed-form return).
J2PowerLawHardening
    von Mises plasticity, ``sigma_y = sigma_y0 * (1 + E*ep/sigma_y0)**N``.
StrainHardeningCreep
    Deviatoric creep, ``rate = (q/A)**(n/(m+1)) * ((m+1)*ec)**(m/(m+1))``,
    integrated with backward Euler.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

SQRT2 = np.sqrt(2.0)
SQRT32 = np.sqrt(1.5)
#: Creep strain floor inside the rate evaluation (m < 0 is singular at 0).
CREEP_STRAIN_FLOOR = 1e-12
MAX_SCALAR_ITER = 50

_I = np.array([1.0, 1.0, 1.0, 0.0])
_IDEV = np.eye(4) - np.outer(_I, _I) / 3.0
# Mandel-4 <- engineering Voigt-3 (plane strain, eps33 = 0)
_P = np.array([[1.0, 0.0, 0.0],
               [0.0, 1.0, 0.0],
               [0.0, 0.0, 0.0],
               [0.0, 0.0, 1.0 / SQRT2]])


class MaterialError(RuntimeError):
    """Raised when a local (scalar) return equation fails to converge."""


# =============================================================================
# Parameters
# =============================================================================
@dataclass(frozen=True)
class ElasticParams:
    E: float
    nu: float

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError("E must be positive")
        if not 0.0 <= self.nu < 0.5:
            raise ValueError("nu must lie in [0, 0.5)")

    @property
    def mu(self):
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def bulk(self):
        return self.E / (3.0 * (1.0 - 2.0 * self.nu))

    @property
    def lam(self):
        return self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))

    def mandel_stiffness(self):
        return 3.0 * self.bulk * np.outer(_I, _I) / 3.0 + 2.0 * self.mu * _IDEV

    def plane_strain_matrix(self):
        """3x3 plane-strain stiffness for (eps11, eps22, gamma12)."""
        return _P.T @ self.mandel_stiffness() @ _P


@dataclass(frozen=True)
class J2LinearParams:
    elastic: ElasticParams
    sigma_y0: float
    h: float

    def __post_init__(self):
        if not self.sigma_y0 > 0:
            raise ValueError("sigma_y0 must be positive")
        if self.h < 0:
            raise ValueError("hardening modulus must be non-negative")


@dataclass(frozen=True)
class PowerLawParams:
    E: float
    nu: float
    sigma_y0: float
    N: float

    def __post_init__(self):
        ElasticParams(self.E, self.nu)
        if not self.sigma_y0 > 0:
            raise ValueError("sigma_y0 must be positive")
        if not 0.0 < self.N < 1.0:
            raise ValueError("hardening exponent N must lie in (0, 1)")

    @property
    def elastic(self):
        return ElasticParams(self.E, self.nu)

    def yield_stress(self, ep):
        return self.sigma_y0 * (1.0 + self.E * ep / self.sigma_y0) ** self.N

    def hardening_modulus(self, ep):
        return self.N * self.E * (1.0 + self.E * ep / self.sigma_y0) ** (
            self.N - 1.0)


@dataclass(frozen=True)
class CreepParams:
    E: float
    nu: float
    A: float
    n: float
    m: float

    def __post_init__(self):
        ElasticParams(self.E, self.nu)
        if not self.A > 0:
            raise ValueError("A must be positive")
        if not self.n > 0:
            raise ValueError("n must be positive")
        if not self.m > -1:
            raise ValueError("m must be greater than -1")

    @property
    def elastic(self):
        return ElasticParams(self.E, self.nu)


# =============================================================================
# State
# =============================================================================
@dataclass
class MaterialState:
    """History variables of a batch of material points.

    Attributes
    ----------
    strain : ndarray, shape (n, 3)
        Last converged total strain (eps11, eps22, gamma12).
    plastic_strain : ndarray, shape (n, 4)
        Plastic/creep strain tensor components (11, 22, 33, 12).
    eqv : ndarray, shape (n,)
        Equivalent plastic or creep strain.
    stress33 : ndarray, shape (n,)
        Out-of-plane stress.
    """
    strain: np.ndarray
    plastic_strain: np.ndarray
    eqv: np.ndarray
    stress33: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros(n))

    def __len__(self):
        return len(self.eqv)

    def take(self, idx):
        return MaterialState(self.strain[idx], self.plastic_strain[idx],
                             self.eqv[idx], self.stress33[idx])

    def put(self, idx, other):
        self.strain[idx] = other.strain
        self.plastic_strain[idx] = other.plastic_strain
        self.eqv[idx] = other.eqv
        self.stress33[idx] = other.stress33

    def copy(self):
        return MaterialState(self.strain.copy(), self.plastic_strain.copy(),
                             self.eqv.copy(), self.stress33.copy())

    @staticmethod
    def concatenate(states):
        return MaterialState(*(np.concatenate([getattr(s, f) for s in states])
                               for f in ('strain', 'plastic_strain', 'eqv',
                                         'stress33')))


def _tensor_to_mandel(t4):
    out = np.array(t4, dtype=float, copy=True)
    out[..., 3] *= SQRT2
    return out


def _mandel_to_tensor(m4):
    out = np.array(m4, dtype=float, copy=True)
    out[..., 3] /= SQRT2
    return out


def voigt_to_mandel(eps):
    """Engineering plane-strain Voigt (n, 3) -> Mandel (n, 4) with eps33 = 0."""
    eps = np.asarray(eps, dtype=float)
    return eps @ _P.T


def mandel_stress_to_voigt(sig):
    return np.stack([sig[..., 0], sig[..., 1], sig[..., 3] / SQRT2], axis=-1)


def mandel_tangent_to_voigt(D):
    return _P.T @ D @ _P


# =============================================================================
# Radial return core
# =============================================================================
def _radial_return(elastic, eps, eps_p, eqv, solve):
    """Shared predictor/corrector for deviatoric (J2-type) flow.

    Parameters
    ----------
    eps : ndarray, shape (n, 4)
        Total strain, Mandel.
    eps_p : ndarray, shape (n, 4)
        Previous plastic strain, Mandel.
    eqv : ndarray, shape (n,)
    solve : callable
        ``solve(q_trial, eqv, active) -> (dgamma, d dgamma / d q_trial)`` on
        the points flagged ``active``; must return zeros where no flow occurs.

    Returns
    -------
    sig, D, eps_p_new, eqv_new, dgamma
    """
    mu, kb = elastic.mu, elastic.bulk
    ee = eps - eps_p
    tr = ee[:, :3].sum(axis=1)
    s_tr = 2.0 * mu * (ee - tr[:, None] * _I / 3.0)
    q_tr = SQRT32 * np.linalg.norm(s_tr, axis=1)
    active = q_tr > 0.0
    dg, dgdq = solve(q_tr, eqv, active)
    n = len(eps)
    D = np.broadcast_to(elastic.mandel_stiffness(), (n, 4, 4)).copy()
    flow = dg > 0.0
    factor = np.ones(n)
    if np.any(flow):
        q = q_tr[flow]
        factor[flow] = 1.0 - 3.0 * mu * dg[flow] / q
        nbar = s_tr[flow] / np.linalg.norm(s_tr[flow], axis=1)[:, None]
        D[flow] = (kb * np.outer(_I, _I)
                   + 2.0 * mu * factor[flow][:, None, None] * _IDEV
                   + (6.0 * mu * mu * (dg[flow] / q - dgdq[flow]))[:, None, None]
                   * nbar[:, :, None] * nbar[:, None, :])
    s = factor[:, None] * s_tr
    sig = s + kb * tr[:, None] * _I
    eps_p_new = eps_p.copy()
    if np.any(flow):
        eps_p_new[flow] += (1.5 * dg[flow] / q_tr[flow])[:, None] * s_tr[flow]
    return sig, D, eps_p_new, eqv + dg, dg


def _safeguarded_newton(residual, lo, hi, x0, xtol, rtol,
                        max_iter=MAX_SCALAR_ITER):
    """Vectorized Newton iteration kept inside a sign-change bracket.

    ``residual(x) -> (r, dr)`` with r(lo) < 0 < r(hi) (increasing root).
    A point is frozen once ``|r| <= rtol``, its Newton step is below
    ``xtol`` or its bracket has shrunk below ``xtol``.
    """
    x = np.clip(x0, lo, hi)
    done = np.zeros(np.shape(x), dtype=bool)
    for _ in range(max_iter):
        r, dr = residual(x)
        done |= np.abs(r) <= rtol
        if np.all(done):
            return x
        lo = np.where(r < 0.0, x, lo)
        hi = np.where(r > 0.0, x, hi)
        with np.errstate(divide='ignore', invalid='ignore'):
            xn = x - r / dr
        bad = ~np.isfinite(xn) | (xn < lo) | (xn > hi)
        xn = np.where(bad, 0.5 * (lo + hi), xn)
        xn = np.where(done, x, xn)
        done |= (np.abs(xn - x) <= xtol) | (hi - lo <= xtol)
        x = xn
        if np.all(done):
            return x
    raise MaterialError("scalar return equation did not converge in "
                        f"{max_iter} iterations")


# =============================================================================
# Models
# =============================================================================
class Material:
    """Base class; subclasses implement :meth:`update_mandel`."""
    time_dependent = False
    elastic: ElasticParams

    def update_mandel(self, eps, state, dt=None):
        raise NotImplementedError

    def update(self, strain, state, dt=None):
        """Stress update for plane-strain Voigt strains.

        Parameters
        ----------
        strain : ndarray, shape (n, 3)
            Total strain (eps11, eps22, gamma12) at the end of the increment.
        state : MaterialState
            Converged state at the start of the increment.
        dt : float, optional
            Time increment (time-dependent models only).

        Returns
        -------
        stress : ndarray, shape (n, 3)
        tangent : ndarray, shape (n, 3, 3)
        new_state : MaterialState
        """
        strain = np.asarray(strain, dtype=float)
        sig, D, eps_p, eqv = self.update_mandel(voigt_to_mandel(strain),
                                                state, dt)
        new = MaterialState(strain.copy(), _mandel_to_tensor(eps_p), eqv,
                            sig[:, 2].copy())
        return mandel_stress_to_voigt(sig), mandel_tangent_to_voigt(D), new


class LinearElastic(Material):
    def __init__(self, params: ElasticParams):
        self.elastic = params

    def update_mandel(self, eps, state, dt=None):
        D = self.elastic.mandel_stiffness()
        sig = eps @ D
        return sig, np.broadcast_to(D, (len(eps), 4, 4)).copy(), \
            _tensor_to_mandel(state.plastic_strain), state.eqv.copy()


class J2LinearHardening(Material):
    def __init__(self, params: J2LinearParams):
        self.params = params
        self.elastic = params.elastic

    def update_mandel(self, eps, state, dt=None):
        p = self.params
        mu = self.elastic.mu

        def solve(q, ep, active):
            f = q - (p.sigma_y0 + p.h * ep)
            plastic = active & (f > 0.0)
            dg = np.where(plastic, f / (3.0 * mu + p.h), 0.0)
            return dg, np.full_like(q, 1.0 / (3.0 * mu + p.h))

        sig, D, ep_new, eqv, _ = _radial_return(
            self.elastic, eps, _tensor_to_mandel(state.plastic_strain),
            state.eqv, solve)
        return sig, D, ep_new, eqv


class J2PowerLawHardening(Material):
    def __init__(self, params: PowerLawParams):
        self.params = params
        self.elastic = params.elastic

    def update_mandel(self, eps, state, dt=None):
        p = self.params
        mu = self.elastic.mu

        def solve(q, ep, active):
            dg = np.zeros_like(q)
            dgdq = np.zeros_like(q)
            plastic = active & (q - p.yield_stress(ep) > 0.0)
            if not np.any(plastic):
                return dg, dgdq
            qp, epp = q[plastic], ep[plastic]

            def residual(x):
                r = qp - 3.0 * mu * x - p.yield_stress(epp + x)
                return -r, 3.0 * mu + p.hardening_modulus(epp + x)

            hi = qp / (3.0 * mu)
            x0 = (qp - p.yield_stress(epp)) / (3.0 * mu
                                               + p.hardening_modulus(epp))
            x = _safeguarded_newton(residual, np.zeros_like(qp), hi, x0,
                                    xtol=1e-15 * hi, rtol=1e-14 * qp)
            dg[plastic] = x
            dgdq[plastic] = 1.0 / (3.0 * mu + p.hardening_modulus(epp + x))
            return dg, dgdq

        sig, D, ep_new, eqv, _ = _radial_return(
            self.elastic, eps, _tensor_to_mandel(state.plastic_strain),
            state.eqv, solve)
        return sig, D, ep_new, eqv


class StrainHardeningCreep(Material):
    time_dependent = True

    def __init__(self, params: CreepParams):
        self.params = params
        self.elastic = params.elastic

    def rate(self, q, ec):
        """Equivalent creep rate and its partial derivatives."""
        p = self.params
        a = p.n / (p.m + 1.0)
        b = p.m / (p.m + 1.0)
        ee = np.maximum(ec, CREEP_STRAIN_FLOOR)
        phi = (q / p.A) ** a * ((p.m + 1.0) * ee) ** b
        with np.errstate(divide='ignore', invalid='ignore'):
            dphi_dq = np.where(q > 0.0, a * phi / q, 0.0)
        dphi_de = np.where(ec > CREEP_STRAIN_FLOOR, b * phi / ee, 0.0)
        return phi, dphi_dq, dphi_de

    def update_mandel(self, eps, state, dt=None):
        if dt is None or not dt > 0.0:
            raise ValueError("creep update needs a positive time increment")
        mu = self.elastic.mu

        def solve(q, ec, active):
            dg = np.zeros_like(q)
            dgdq = np.zeros_like(q)
            if not np.any(active):
                return dg, dgdq
            qa, eca = q[active], ec[active]

            # solved for y = ln(dgamma): the rate is singular at zero creep
            # strain when m < 0, which makes the residual in dgamma itself
            # extremely steep, while in y it is close to linear
            def residual(y):
                x = np.exp(y)
                phi, pq, pe = self.rate(qa - 3.0 * mu * x, eca + x)
                with np.errstate(divide='ignore', invalid='ignore'):
                    r = y - np.log(dt * phi)
                    dr = 1.0 + x * (3.0 * mu * pq - pe) / phi
                return r, dr

            ymax = np.log(qa / (3.0 * mu))
            phi0, _, _ = self.rate(qa, np.maximum(eca, 1e-300))
            with np.errstate(divide='ignore'):
                y0 = np.minimum(np.log(dt * phi0), ymax - np.log(2.0))
            y = _safeguarded_newton(residual, ymax - 700.0, ymax, y0,
                                    xtol=1e-15, rtol=1e-14)
            x = np.exp(y)
            _, pq, pe = self.rate(qa - 3.0 * mu * x, eca + x)
            dg[active] = x
            dgdq[active] = dt * pq / (1.0 + 3.0 * mu * dt * pq - dt * pe)
            return dg, dgdq

        sig, D, ep_new, eqv, _ = _radial_return(
            self.elastic, eps, _tensor_to_mandel(state.plastic_strain),
            state.eqv, solve)
        return sig, D, ep_new, eqv


def make_material(params):
    """Construct the model matching a parameter block."""
    if isinstance(params, ElasticParams):
        return LinearElastic(params)
    if isinstance(params, J2LinearParams):
        return J2LinearHardening(params)
    if isinstance(params, PowerLawParams):
        return J2PowerLawHardening(params)
    if isinstance(params, CreepParams):
        return StrainHardeningCreep(params)
    raise TypeError(f"unknown material parameters {params!r}")


# =============================================================================
# Single-point functional interface
# =============================================================================
def _as_batch(state, d_strain):
    d = np.atleast_2d(np.asarray(d_strain, dtype=float))
    if state is None:
        state = MaterialState.zeros(len(d))
    return state, d


def _single(result, squeeze):
    sig, C, st = result
    if squeeze:
        return sig[0], C[0], st
    return sig, C, st


def elastic_stress(params: ElasticParams, strain):
    """Plane-strain Hooke law; returns ``(stress, C)``."""
    C = params.plane_strain_matrix()
    return np.asarray(strain, dtype=float) @ C.T, C


def j2_return_map(params: J2LinearParams, state, d_strain):
    """Linear-hardening J2 update for a strain increment ``d_strain``."""
    squeeze = np.ndim(d_strain) == 1
    state, d = _as_batch(state, d_strain)
    return _single(J2LinearHardening(params).update(state.strain + d, state),
                   squeeze)


def powerlaw_return_map(params: PowerLawParams, state, d_strain):
    """Power-law-hardening J2 update for a strain increment ``d_strain``."""
    squeeze = np.ndim(d_strain) == 1
    state, d = _as_batch(state, d_strain)
    return _single(J2PowerLawHardening(params).update(state.strain + d, state),
                   squeeze)


def creep_increment(params: CreepParams, state, strain_new, dt):
    """Backward-Euler creep update to total strain ``strain_new``."""
    squeeze = np.ndim(strain_new) == 1
    eps = np.atleast_2d(np.asarray(strain_new, dtype=float))
    if state is None:
        state = MaterialState.zeros(len(eps))
    return _single(StrainHardeningCreep(params).update(eps, state, dt),
                   squeeze)


def equivalent_stress(stress_voigt, stress33):
    """von Mises stress from plane-strain Voigt stress plus sigma33."""
    s = np.asarray(stress_voigt, dtype=float)
    s11, s22, s12 = s[..., 0], s[..., 1], s[..., 2]
    s33 = np.asarray(stress33, dtype=float)
    return np.sqrt(0.5 * ((s11 - s22) ** 2 + (s22 - s33) ** 2
                          + (s33 - s11) ** 2) + 3.0 * s12 ** 2)


# =============================================================================
# Mixed-control single point drivers
# =============================================================================
def drive_mandel_stress(material, stress_target, state=None, eps0=None, dt=None,
                        tol=1e-12, max_iter=30):
    """Find the Mandel-4 strain producing a prescribed Mandel-4 stress.

    Returns ``(eps, sig, eps_p_mandel, eqv)`` for a single point; the state is
    not modified.
    """
    state = state or MaterialState.zeros(1)
    target = np.asarray(stress_target, dtype=float).reshape(1, 4)
    eps = np.zeros((1, 4)) if eps0 is None else \
        np.asarray(eps0, dtype=float).reshape(1, 4).copy()
    scale = max(np.linalg.norm(target), material.elastic.E * 1e-12)
    for _ in range(max_iter):
        sig, D, ep, eqv = material.update_mandel(eps, state, dt)
        r = sig - target
        if np.linalg.norm(r) <= tol * scale:
            return eps[0], sig[0], ep[0], eqv[0]
        eps -= np.linalg.solve(D[0], r[0])[None, :]
    raise MaterialError("stress-controlled point did not converge")


def creep_under_constant_stress(params: CreepParams, sigma, times):
    """Uniaxial creep test at fixed stress ``sigma`` (applied at t=0).

    ``times`` is the increasing time grid starting at 0. Returns the
    equivalent creep strain at every grid time.
    """
    material = StrainHardeningCreep(params)
    target = np.array([sigma, 0.0, 0.0, 0.0])
    state = MaterialState.zeros(1)
    eps = None
    out = [0.0]
    for dt in np.diff(np.asarray(times, dtype=float)):
        eps, _, ep, eqv = drive_mandel_stress(material, target, state, eps,
                                              dt)
        state = MaterialState(state.strain, _mandel_to_tensor(ep[None]),
                              np.array([eqv]), state.stress33)
        out.append(eqv)
    return np.array(out)


def uniaxial_plane_strain(material, e11_path, dt=None, tol=1e-12, max_iter=30):
    """Plane-strain point driven by eps11 with sigma22 = sigma12 = 0.

    Returns arrays (sigma11, eps22) along the path.
    """
    state = MaterialState.zeros(1)
    eps = np.zeros((1, 3))
    s11, e22 = [], []
    free = [1, 2]
    for e11 in e11_path:
        eps[0, 0] = e11
        for _ in range(max_iter):
            sig, C, new = material.update(eps, state, dt)
            r = sig[0, free]
            if np.linalg.norm(r) <= tol * max(abs(sig[0, 0]),
                                              material.elastic.E * 1e-14):
                break
            eps[0, free] -= np.linalg.solve(C[0][np.ix_(free, free)], r)
        else:
            raise MaterialError("uniaxial point did not converge")
        state = new
        s11.append(sig[0, 0])
        e22.append(eps[0, 1])
    return np.array(s11), np.array(e22)
