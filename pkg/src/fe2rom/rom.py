"""Projection-based reduced model of the RVE.

The fluctuation field is restricted to ``w = V alpha`` where the first
columns of ``V`` are the (orthonormalized) elastic responses to the three
unit macro strains and the remaining ones are POD modes of the deflated
snapshot matrix. The reduced Newton iteration, the homogenized tangent and
the force-integrand snapshots are evaluated on an arbitrary set of
integration points with arbitrary weights, so the same code serves the fully
integrated ROM and the hyper-reduced model.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .materials import MaterialState
from .rve import NonConvergenceError, Rve

ELASTIC_MODE_TOL = 1e-10


class RankError(ValueError):
    """Requested more modes than the snapshots support."""

    def __init__(self, message, max_modes):
        super().__init__(message)
        self.max_modes = max_modes


@dataclass
class ReducedBasis:
    """Orthonormal fluctuation modes.

    Attributes
    ----------
    V : ndarray, shape (n_dofs, n_modes)
    singular_values : ndarray
        Spectrum of the deflated snapshot matrix (descending).
    elastic_mode_count : int
    degenerate : bool
        True when the elastic modes collapsed (homogeneous RVE).
    """
    V: np.ndarray
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    elastic_mode_count: int = 3
    degenerate: bool = False
    source_hash: str = ''

    @property
    def n_modes(self):
        return self.V.shape[1]

    def energy_fraction(self, k):
        """Share of deflated snapshot energy captured by the first k POD modes."""
        s2 = self.singular_values ** 2
        total = s2.sum()
        if total == 0.0:
            return 1.0
        return float(s2[:k].sum() / total)

    def truncate(self, n_modes):
        if n_modes > self.n_modes:
            raise RankError(f"basis holds only {self.n_modes} modes",
                            self.n_modes)
        return ReducedBasis(self.V[:, :n_modes].copy(), self.singular_values,
                            self.elastic_mode_count, self.degenerate,
                            self.source_hash)

    def hash(self):
        return array_hash(self.V)


def array_hash(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=float)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def _orthonormalize(X, tol):
    """Modified Gram-Schmidt with re-orthogonalization; drops small columns."""
    Q = []
    for x in X.T:
        v = x.astype(float).copy()
        ref = np.linalg.norm(v)
        for _ in range(2):
            for q in Q:
                v -= (q @ v) * q
        nv = np.linalg.norm(v)
        if ref > 0 and nv > tol * ref:
            Q.append(v / nv)
    return np.column_stack(Q) if Q else np.zeros((X.shape[0], 0))


def build_elastic_modes(rve: Rve, state: Optional[MaterialState] = None):
    """Orthonormal fluctuation responses to the three unit macro strains.

    Returns
    -------
    modes : ndarray, shape (n_dofs, k)
        ``k`` is 3 for a heterogeneous RVE and 0 when all responses vanish.
    raw : ndarray, shape (n_dofs, 3)
        Fluctuation fields before orthonormalization.
    """
    state = state if state is not None else rve.initial_state()
    lin = rve.linearize(np.zeros(3), rve.zero_fluctuation(), state,
                        dt=_probe_dt(rve))
    if rve.n_q == 0:
        return np.zeros((rve.n_dofs, 0)), np.zeros((rve.n_dofs, 3))
    lu = rve.factorize(lin.K)
    raw = np.column_stack([rve.expand(-lu.solve(lin.G[:, k]))
                           for k in range(3)])
    scale = np.max(np.abs(rve.A))
    keep = np.linalg.norm(raw, axis=0) > ELASTIC_MODE_TOL * scale
    modes = _orthonormalize(raw[:, keep], 1e-8)
    return modes, raw


def _probe_dt(rve):
    # elastic response of time-dependent models: zero stress means no flow
    return 1.0 if rve.time_dependent else None


def pod(x_u, n_modes, elastic_modes, rank_tol=1e-10):
    """Elastic modes followed by leading POD modes of the deflated snapshots.

    Parameters
    ----------
    x_u : ndarray, shape (n_dofs, n_snapshots)
    n_modes : int
        Total number of modes (elastic included).
    elastic_modes : ndarray, shape (n_dofs, k)

    Raises
    ------
    RankError
        If more modes are requested than ``k + rank(deflated x_u)``.
    """
    X = np.asarray(x_u, dtype=float)
    Ve = np.asarray(elastic_modes, dtype=float)
    ne = Ve.shape[1]
    if X.size == 0:
        raise ValueError("empty snapshot matrix")
    if n_modes < ne:
        raise ValueError(f"need at least the {ne} elastic modes")
    D = X.copy()
    for _ in range(2):
        D -= Ve @ (Ve.T @ D)
    U, s, _ = np.linalg.svd(D, full_matrices=False)
    s_ref = np.linalg.norm(X, 2)
    rank = int(np.sum(s > rank_tol * s_ref)) if s_ref > 0 else 0
    n_pod = n_modes - ne
    if n_pod > rank:
        raise RankError(f"requested {n_modes} modes but at most "
                        f"{ne + rank} are supported by the snapshots",
                        ne + rank)
    V = _orthonormalize(np.concatenate([Ve, U[:, :n_pod]], axis=1), 1e-8)
    return ReducedBasis(V, s[:max(rank, 1)] if rank else np.zeros(0),
                        ne, ne == 0, array_hash(X))


# =============================================================================
# Reduced solver
# =============================================================================
@dataclass
class ReducedResult:
    alpha: np.ndarray          # (P, n_modes)
    state: MaterialState       # states at the integration set, P blocks
    stress: np.ndarray         # (P, 3)
    tangent: Optional[np.ndarray]   # (P, 3, 3)
    iterations: int
    ip_stress: np.ndarray      # (P, p, 3)
    residuals: list = field(default_factory=list)
    point_iterations: int = 0  # Newton iterations summed over macro points


class ReducedRve:
    """Galerkin-reduced RVE on a set of integration points.

    Parameters
    ----------
    rve : Rve
    basis : ReducedBasis
    point_ids : ndarray of int, optional
        Integration points kept (default: all).
    weights : ndarray, optional
        Weights of the kept points (default: the full quadrature weights).
    """

    def __init__(self, rve: Rve, basis: ReducedBasis, point_ids=None,
                 weights=None):
        self.rve = rve
        self.basis = basis
        if point_ids is None:
            point_ids = np.arange(rve.n_points)
        self.point_ids = np.asarray(point_ids, dtype=np.int64)
        self.weights = (rve.weights[self.point_ids] if weights is None
                        else np.asarray(weights, dtype=float))
        V = basis.V
        ids = self.point_ids
        # strain modes at the kept points, (p, 3, n)
        self.BV = np.matmul(rve.B[ids], V[rve.ip_dofs[ids]])
        # (3p, n): rows ordered (point, component)
        self.A = np.ascontiguousarray(self.BV.reshape(-1, basis.n_modes))
        ip_mat = rve.mesh.ip_material_ids()[ids]
        self.groups = [(mat, np.flatnonzero(ip_mat == k))
                       for k, mat in sorted(rve.materials.items())
                       if np.any(ip_mat == k)]
        self.volume = rve.volume
        self.E_ref = rve.E_ref

    @property
    def n_modes(self):
        return self.basis.n_modes

    @property
    def n_points(self):
        return len(self.point_ids)

    def initial_state(self, n_macro=1):
        return MaterialState.zeros(n_macro * self.n_points)

    def _material(self, strain, state, dt):
        """Material update on (P, p, 3) strains with P-blocked states."""
        P, p = strain.shape[:2]
        sig = np.empty((P, p, 3))
        C = np.empty((P, p, 3, 3))
        new = MaterialState.zeros(P * p)
        flat = np.arange(P * p).reshape(P, p)
        for mat, idx in self.groups:
            fidx = flat[:, idx].reshape(-1)
            s, c, st = mat.update(strain[:, idx].reshape(-1, 3),
                                  state.take(fidx), dt)
            sig[:, idx] = s.reshape(P, len(idx), 3)
            C[:, idx] = c.reshape(P, len(idx), 3, 3)
            new.put(fidx, st)
        return sig, C, new

    def strains(self, E, alpha):
        P = len(E)
        return E[:, None, :] + (alpha @ self.A.T).reshape(P, -1, 3)

    def assemble(self, E, alpha, state, dt=None):
        """Reduced residual, stiffness and macro quantities.

        Returns
        -------
        r : (P, n)
        K : (P, n, n)
        G : (P, n, 3)   coupling to macro strain
        Sigma : (P, 3)
        Cbar : (P, 3, 3)
        sig, C, trial_state
        """
        eps = self.strains(E, alpha)
        sig, C, trial = self._material(eps, state, dt)
        P, p = sig.shape[:2]
        wsig = sig * self.weights[None, :, None]
        wC = C * self.weights[None, :, None, None]
        At = self.A.T[None]
        r = np.matmul(At, wsig.reshape(P, 3 * p, 1))[:, :, 0]
        G = np.matmul(At, wC.reshape(P, 3 * p, 3))
        CBV = np.matmul(wC, self.BV[None]).reshape(P, 3 * p, self.n_modes)
        K = np.matmul(At, CBV)
        Sigma = wsig.sum(axis=1) / self.volume
        Cbar = wC.sum(axis=1) / self.volume
        return r, K, G, Sigma, Cbar, sig, C, trial

    def solve(self, E, state, alpha0=None, dt=None, tol=1e-8, max_iter=25,
              tangent=True):
        """Batched reduced Newton for macro strains ``E`` of shape (P, 3).

        ``state`` holds P consecutive blocks of per-point states.
        """
        E = np.atleast_2d(np.asarray(E, dtype=float))
        P, n = len(E), self.n_modes
        alpha = np.zeros((P, n)) if alpha0 is None else \
            np.array(alpha0, dtype=float).reshape(P, n)
        history = []
        point_its = 0
        for it in range(max_iter + 1):
            r, K, G, Sigma, Cbar, sig, C, trial = self.assemble(
                E, alpha, state, dt)
            rn = np.linalg.norm(r, axis=1)
            ref = np.maximum(self.volume * np.linalg.norm(Sigma, axis=1),
                             1e-12 * self.E_ref * self.volume)
            history.append(float(np.max(rn / ref)) if P else 0.0)
            if not np.all(np.isfinite(rn)):
                raise NonConvergenceError("non-finite reduced residual")
            todo = rn > tol * ref
            if not np.any(todo):
                Ch = None
                if tangent:
                    Ch = Cbar - np.einsum(
                        'Pki,Pkj->Pij', G,
                        _solve(K, G)) / self.volume if n else Cbar
                return ReducedResult(alpha, trial, Sigma, Ch, it, sig,
                                     history, point_its)
            if it == max_iter:
                break
            idx = np.flatnonzero(todo)
            point_its += len(idx)
            d = -_solve(K[idx], r[idx][:, :, None])[:, :, 0]
            alpha[idx] = self._line_search(E[idx], alpha[idx], d,
                                           self._blocks(state, idx), dt,
                                           rn[idx])
        raise NonConvergenceError(
            f"reduced Newton did not converge in {max_iter} iterations",
            history[-1])

    def _blocks(self, state, idx):
        p = self.n_points
        flat = (np.asarray(idx)[:, None] * p + np.arange(p)[None]).reshape(-1)
        return state.take(flat)

    def _line_search(self, E, alpha, d, state, dt, rn, max_halvings=6):
        """Per-point backtracking until the reduced residual decreases."""
        step = np.ones(len(E))
        out = alpha + d
        todo = np.arange(len(E))
        for _ in range(max_halvings):
            trial = alpha[todo] + step[todo, None] * d[todo]
            eps = self.strains(E[todo], trial)
            sig, _, _ = self._material(eps, self._blocks(state, todo), dt)
            P = len(todo)
            r = np.matmul(self.A.T[None], (sig * self.weights[None, :, None]
                                           ).reshape(P, -1, 1))[:, :, 0]
            ok = np.linalg.norm(r, axis=1) < rn[todo]
            out[todo] = trial
            todo = todo[~ok]
            if todo.size == 0:
                break
            step[todo] *= 0.5
        return out

    def force_integrands(self, E, alpha, state, dt=None, with_stress=False):
        """Per-point reduced-force integrands ``w BV^T sigma``, point-major.

        Returns an array of shape (P, p * n_modes), or (P, p * (3 + n_modes))
        with ``w sigma`` prepended per point when ``with_stress`` is set.
        """
        eps = self.strains(np.atleast_2d(E), np.atleast_2d(alpha))
        sig, _, _ = self._material(eps, state, dt)
        return integrands_from_stress(self, sig, with_stress)

    def reconstruct(self, alpha):
        return np.atleast_2d(alpha) @ self.basis.V.T


def integrands_from_stress(model: ReducedRve, sig, with_stress=False):
    """Point-major stacking of ``w BV^T sigma`` (optionally ``w sigma`` first)."""
    w = model.weights[None, :, None]
    out = w * np.einsum('pik,Ppi->Ppk', model.BV, sig)
    if with_stress:
        out = np.concatenate([w * sig, out], axis=2)
    return out.reshape(len(sig), -1)


def _solve(K, b):
    try:
        return np.linalg.solve(K, b)
    except np.linalg.LinAlgError as exc:
        raise NonConvergenceError(f"singular reduced stiffness: {exc}")


def reduced_newton(rve: Rve, basis: ReducedBasis, E, state=None, alpha0=None,
                   tol=1e-8, dt=None):
    """Single-point reduced solve.

    Returns
    -------
    alpha, state, Sigma, C_hom
    """
    model = ReducedRve(rve, basis)
    state = state if state is not None else model.initial_state()
    res = model.solve(np.asarray(E, dtype=float)[None], state, alpha0, dt,
                      tol)
    return res.alpha[0], res.state, res.stress[0], res.tangent[0]
