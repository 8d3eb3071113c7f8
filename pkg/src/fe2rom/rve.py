"""Strain-driven RVE boundary value problem.

The micro displacement is split as ``u = A E + w``: an affine part driven by
the macro strain ``E = (E11, E22, 2E12)`` and a fluctuation ``w`` that
vanishes on the boundary (linear BC) or is periodic with pinned corners
(periodic BC). Newton's method is run on the independent fluctuation dofs;
the homogenized tangent is obtained by static condensation with the
converged stiffness.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .materials import Material, MaterialState
from .mesh import DofMap, Mesh

log = logging.getLogger(__name__)

MAX_BISECTIONS = 4


class BoundaryConditionError(ValueError):
    """Raised when periodic boundary nodes cannot be paired."""


class NonConvergenceError(RuntimeError):
    """Newton iteration failed; ``residual`` holds the last residual norm."""

    def __init__(self, message, residual=float('nan')):
        super().__init__(message)
        self.residual = residual


# =============================================================================
# Boundary conditions
# =============================================================================
def affine_matrix(nodes):
    """Map macro strain (E11, E22, gamma12) to nodal affine displacements."""
    n = len(nodes)
    A = np.zeros((2 * n, 3))
    A[0::2, 0] = nodes[:, 0]
    A[0::2, 2] = 0.5 * nodes[:, 1]
    A[1::2, 1] = nodes[:, 1]
    A[1::2, 2] = 0.5 * nodes[:, 0]
    return A


def _pair(mesh, a, b, axis, tol=1e-9):
    """Pair node set ``b`` to ``a`` by equal coordinate along ``axis``."""
    ia, ib = mesh.node_sets[a], mesh.node_sets[b]
    if len(ia) != len(ib):
        raise BoundaryConditionError(f"sets {a!r}/{b!r} differ in size")
    ka = np.argsort(mesh.nodes[ia, axis], kind='stable')
    kb = np.argsort(mesh.nodes[ib, axis], kind='stable')
    ia, ib = ia[ka], ib[kb]
    if np.max(np.abs(mesh.nodes[ia, axis] - mesh.nodes[ib, axis]),
              initial=0.0) > tol:
        raise BoundaryConditionError(f"sets {a!r}/{b!r} are not periodic")
    return ia, ib


def fluctuation_map(mesh: Mesh, bc_kind='linear'):
    """Independent fluctuation index for every dof (-1: fluctuation is 0).

    Returns
    -------
    qmap : ndarray of int, shape (n_dofs,)
    n_q : int
    """
    n = mesh.n_nodes
    owner = np.arange(n)
    if bc_kind == 'linear':
        owner[mesh.node_sets['boundary']] = -1
    elif bc_kind == 'periodic':
        lo_x, hi_x = mesh.nodes[:, 0].min(), mesh.nodes[:, 0].max()
        lo_y, hi_y = mesh.nodes[:, 1].min(), mesh.nodes[:, 1].max()
        left, right = _pair(mesh, 'left', 'right', 1)
        bottom, top = _pair(mesh, 'bottom', 'top', 0)
        owner[right] = left
        owner[top] = owner[bottom]
        corner = (np.isclose(mesh.nodes[:, 0], lo_x)
                  | np.isclose(mesh.nodes[:, 0], hi_x)) & \
                 (np.isclose(mesh.nodes[:, 1], lo_y)
                  | np.isclose(mesh.nodes[:, 1], hi_y))
        owner[corner] = -1
        # resolve chains (top-right -> bottom-right -> bottom-left)
        for _ in range(2):
            valid = owner >= 0
            owner[valid] = owner[owner[valid]]
    else:
        raise ValueError(f"unknown bc kind {bc_kind!r}")
    indep = np.unique(owner[owner >= 0])
    node_q = -np.ones(n, dtype=np.int64)
    node_q[indep] = np.arange(len(indep))
    qnode = np.where(owner >= 0, node_q[np.maximum(owner, 0)], -1)
    qmap = np.empty(2 * n, dtype=np.int64)
    qmap[0::2] = np.where(qnode >= 0, 2 * qnode, -1)
    qmap[1::2] = np.where(qnode >= 0, 2 * qnode + 1, -1)
    return qmap, 2 * len(indep)


@dataclass
class MicroDofMap:
    """Boundary-condition description for one macro strain.

    ``dof_map`` lists dofs with prescribed total displacement; for periodic
    conditions ``slaves[i]`` follows ``masters[i]`` with offset ``offsets[i]``.
    """
    dof_map: DofMap
    slaves: np.ndarray
    masters: np.ndarray
    offsets: np.ndarray


def apply_macro_strain(mesh: Mesh, E, bc_kind='linear') -> MicroDofMap:
    """Prescribed displacements and periodic constraints for macro strain E."""
    E = np.asarray(E, dtype=float)
    A = affine_matrix(mesh.nodes)
    qmap, _ = fluctuation_map(mesh, bc_kind)
    fixed = np.flatnonzero(qmap < 0)
    dm = DofMap(mesh.n_dofs, fixed, A[fixed] @ E)
    if bc_kind == 'linear':
        empty = np.zeros(0, dtype=np.int64)
        return MicroDofMap(dm, empty, empty, np.zeros(0))
    # slave dofs: share a q index with a lower-numbered master dof
    order = np.argsort(qmap, kind='stable')
    slaves, masters = [], []
    first = {}
    for d in order:
        q = qmap[d]
        if q < 0:
            continue
        if q in first:
            slaves.append(d)
            masters.append(first[q])
        else:
            first[q] = d
    slaves = np.array(slaves, dtype=np.int64)
    masters = np.array(masters, dtype=np.int64)
    return MicroDofMap(dm, slaves, masters, (A[slaves] - A[masters]) @ E)


# =============================================================================
# Solver
# =============================================================================
@dataclass
class Linearization:
    """Micro quantities at one iterate."""
    stress: np.ndarray            # (m, 3) integration-point stress
    tangent: np.ndarray           # (m, 3, 3)
    state: MaterialState          # trial state
    residual: np.ndarray          # (n_q,)
    reference: float              # force scale for convergence
    macro_stress: np.ndarray      # volume average of stress
    mean_tangent: np.ndarray      # volume average of tangent
    K: Optional[sp.csr_matrix] = None
    G: Optional[np.ndarray] = None  # (n_q, 3) coupling T^T K A

    @property
    def residual_norm(self):
        return float(np.linalg.norm(self.residual))


@dataclass
class MicroResult:
    w: np.ndarray
    state: MaterialState
    stress: np.ndarray
    tangent: np.ndarray
    iterations: int
    residuals: List[float] = field(default_factory=list)
    ip_stress: Optional[np.ndarray] = None


class Rve:
    """Finite-element model of the unit cell.

    Parameters
    ----------
    mesh : Mesh
    materials : dict of int to Material
        Model per element material id.
    bc_kind : {'linear', 'periodic'}
    """

    def __init__(self, mesh: Mesh, materials: Dict[int, Material],
                 bc_kind='linear'):
        self.mesh = mesh
        self.materials = dict(materials)
        self.bc_kind = bc_kind
        B, w, _, x_ip = mesh.geometry()
        self.B = B
        self.Bt = np.ascontiguousarray(B.transpose(0, 2, 1))
        self.wBt = self.Bt * w[:, None, None]
        self.weights = w
        self.x_ip = x_ip
        self.volume = float(w.sum())
        npe = mesh.n_points_per_element
        self.npe = npe
        self.edofs = mesh.element_dofs()
        self.ip_dofs = np.repeat(self.edofs, npe, axis=0)
        ip_mat = mesh.ip_material_ids()
        missing = set(np.unique(ip_mat)) - set(self.materials)
        if missing:
            raise ValueError(f"no material for ids {sorted(missing)}")
        self.groups = [(self.materials[k], np.flatnonzero(ip_mat == k))
                       for k in sorted(self.materials)
                       if np.any(ip_mat == k)]
        self.time_dependent = any(m.time_dependent for m, _ in self.groups)
        self.A = affine_matrix(mesh.nodes)
        self.qmap, self.n_q = fluctuation_map(mesh, bc_kind)
        self._build_pattern()
        self.E_ref = max(m.elastic.E for m, _ in self.groups)

    # -------------------------------------------------------------------------
    @property
    def n_dofs(self):
        return self.mesh.n_dofs

    @property
    def n_points(self):
        return len(self.weights)

    def _build_pattern(self):
        eq = self.qmap[self.edofs]                          # (ne, 12)
        rows = np.broadcast_to(eq[:, :, None], eq.shape + (12,))
        cols = np.broadcast_to(eq[:, None, :], eq.shape + (12,))
        valid = (rows >= 0) & (cols >= 0)
        self._kvalid = valid.reshape(-1)
        keys = rows.reshape(-1)[self._kvalid] * self.n_q + \
            cols.reshape(-1)[self._kvalid]
        uniq, inv = np.unique(keys, return_inverse=True)
        self._kinv = inv.reshape(-1)
        self._nnz = len(uniq)
        r, c = np.divmod(uniq, self.n_q)
        self._indices = c.astype(np.int32)
        self._indptr = np.searchsorted(
            r, np.arange(self.n_q + 1)).astype(np.int32)
        self._fvalid = (eq >= 0).reshape(-1)
        self._fidx = eq.reshape(-1)[self._fvalid]

    def initial_state(self):
        return MaterialState.zeros(self.n_points)

    def zero_fluctuation(self):
        return np.zeros(self.n_dofs)

    def expand(self, wq):
        """Full fluctuation vector from independent values."""
        return np.where(self.qmap >= 0, wq[np.maximum(self.qmap, 0)], 0.0)

    def strains(self, E, w):
        """Integration-point strains of ``u = A E + w``."""
        return np.asarray(E, dtype=float)[None, :] + np.matmul(
            self.B, w[self.ip_dofs][:, :, None])[:, :, 0]

    def material_update(self, strain, state, dt=None):
        m = len(strain)
        sig = np.empty((m, 3))
        C = np.empty((m, 3, 3))
        new = MaterialState.zeros(m)
        for mat, idx in self.groups:
            s, c, st = mat.update(strain[idx], state.take(idx), dt)
            sig[idx] = s
            C[idx] = c
            new.put(idx, st)
        return sig, C, new

    def reduce_q(self, fe):
        """Scatter element vectors (ne, 12) onto independent dofs."""
        return np.bincount(self._fidx, weights=fe.reshape(-1)[self._fvalid],
                           minlength=self.n_q)

    def internal_force(self, stress):
        """Full internal force vector for integration-point stresses."""
        fe = np.matmul(self.wBt, stress[:, :, None])[:, :, 0]
        return np.bincount(self.ip_dofs.reshape(-1), weights=fe.reshape(-1),
                           minlength=self.n_dofs)

    def linearize(self, E, w, state, dt=None, with_matrix=True):
        """Stress, residual and (optionally) stiffness at ``u = A E + w``."""
        eps = self.strains(E, w)
        sig, C, trial = self.material_update(eps, state, dt)
        wts = self.weights
        fe_ip = np.matmul(self.wBt, sig[:, :, None])[:, :, 0]   # (m, 12)
        fe = fe_ip.reshape(-1, self.npe, 12).sum(axis=1)
        r = self.reduce_q(fe)
        f_full = np.bincount(self.edofs.reshape(-1), weights=fe.reshape(-1),
                             minlength=self.n_dofs)
        ref = max(float(np.linalg.norm(f_full)),
                  1e-12 * self.E_ref * self.volume)
        Sigma = wts @ sig / self.volume
        Cbar = np.tensordot(wts, C, axes=1) / self.volume
        lin = Linearization(sig, C, trial, r, ref, Sigma, Cbar)
        if with_matrix:
            BtC = np.matmul(self.wBt, C)                      # (m, 12, 3)
            ke = np.matmul(BtC, self.B)
            ke = ke.reshape(-1, self.npe, 12, 12).sum(axis=1)
            data = np.bincount(self._kinv,
                               weights=ke.reshape(-1)[self._kvalid],
                               minlength=self._nnz)
            lin.K = sp.csr_matrix((data, self._indices, self._indptr),
                                  shape=(self.n_q, self.n_q))
            ge = BtC.reshape(-1, self.npe, 12, 3).sum(axis=1)
            lin.G = np.stack([self.reduce_q(ge[:, :, k]) for k in range(3)],
                             axis=1)
        return lin

    @staticmethod
    def factorize(K):
        return spla.splu(K.tocsc(), permc_spec='MMD_AT_PLUS_A',
                         diag_pivot_thresh=0.0,
                         options=dict(SymmetricMode=True))

    def condensed_tangent(self, lin, lu=None):
        """Consistent homogenized tangent ``Cbar - G^T K^-1 G / |Omega|``."""
        if self.n_q == 0:
            return lin.mean_tangent.copy()
        lu = lu or self.factorize(lin.K)
        X = lu.solve(lin.G)
        return lin.mean_tangent - lin.G.T @ X / self.volume

    def solve(self, E, state, w0=None, dt=None, tol=1e-8, max_iter=25,
              tangent=True):
        """Newton solve of the fluctuation field for macro strain ``E``.

        Parameters
        ----------
        E : array_like, shape (3,)
        state : MaterialState
            Converged state at the start of the increment (not modified).
        w0 : ndarray, optional
            Starting fluctuation (full dof vector).

        Returns
        -------
        MicroResult

        Raises
        ------
        NonConvergenceError
            If ``max_iter`` Newton iterations do not reduce the residual below
            ``tol`` times the reference force.
        """
        E = np.asarray(E, dtype=float)
        w = self.zero_fluctuation() if w0 is None else np.array(w0, float)
        history = []
        for it in range(max_iter + 1):
            lin = self.linearize(E, w, state, dt, with_matrix=True)
            rn = lin.residual_norm
            history.append(rn)
            if not np.isfinite(rn):
                raise NonConvergenceError("non-finite micro residual", rn)
            if rn <= tol * lin.reference:
                C = self.condensed_tangent(lin) if tangent else None
                return MicroResult(w, lin.state, lin.macro_stress, C, it,
                                   history, lin.stress)
            if it == max_iter:
                break
            lu = self.factorize(lin.K)
            w = self._line_search(E, w, -self.expand(lu.solve(lin.residual)),
                                  state, dt, rn)
        raise NonConvergenceError(
            f"micro Newton did not converge in {max_iter} iterations "
            f"(residual {history[-1]:.3e})", history[-1])

    def _line_search(self, E, w, d, state, dt, rn, max_halvings=6):
        """Backtrack the Newton step until the residual norm decreases."""
        step = 1.0
        for _ in range(max_halvings):
            trial = w + step * d
            r = self.linearize(E, trial, state, dt, with_matrix=False)
            if r.residual_norm < rn:
                return trial
            step *= 0.5
        return w + step * d

    def homogenize(self, E, w, state, dt=None):
        """Volume-averaged stress and condensed tangent at a converged field.

        ``state`` is the state at the start of the increment leading to ``w``.
        """
        lin = self.linearize(E, w, state, dt)
        return HomogenizedResponse(lin.macro_stress,
                                   self.condensed_tangent(lin))

    def boundary_traction_average(self, E, w, state, dt=None):
        """Macro stress from boundary reaction forces, ``sum f (x) x / |Omega|``."""
        sig, _, _ = self.material_update(self.strains(E, w), state, dt)
        f = self.internal_force(sig).reshape(-1, 2)
        ids = self.mesh.node_sets['boundary']
        x = self.mesh.nodes[ids]
        T = np.einsum('ai,aj->ij', f[ids], x) / self.volume
        return np.array([T[0, 0], T[1, 1], 0.5 * (T[0, 1] + T[1, 0])])


@dataclass
class HomogenizedResponse:
    stress: np.ndarray
    tangent: np.ndarray


def homogenize(rve: Rve, E, w, state, dt=None) -> HomogenizedResponse:
    return rve.homogenize(E, w, state, dt)


def micro_newton(rve: Rve, E, state, w0=None, dt=None, tol=1e-8, max_iter=25):
    """Functional alias of :meth:`Rve.solve`."""
    return rve.solve(E, state, w0=w0, dt=dt, tol=tol, max_iter=max_iter)


# =============================================================================
# Mixed control
# =============================================================================
def solve_mixed(rve: Rve, E_guess, strain_mask, stress_target, state, w0=None,
                dt=None, tol=1e-8, max_iter=20, micro_tol=1e-10):
    """Solve for the macro strain with some components stress-controlled.

    ``strain_mask[i]`` True means ``E[i]`` is prescribed (taken from
    ``E_guess``); otherwise ``Sigma[i] = stress_target[i]`` is enforced by a
    Newton iteration on the homogenized tangent.
    """
    E = np.array(E_guess, dtype=float)
    mask = np.asarray(strain_mask, dtype=bool)
    free = np.flatnonzero(~mask)
    target = np.asarray(stress_target, dtype=float)
    w = w0
    for _ in range(max_iter):
        res = rve.solve(E, state, w0=w, dt=dt, tol=micro_tol)
        w = res.w
        if free.size == 0:
            return E, res
        r = res.stress[free] - target[free]
        scale = max(np.linalg.norm(res.stress), 1e-12 * rve.E_ref)
        if np.linalg.norm(r) <= tol * scale:
            return E, res
        E[free] -= np.linalg.solve(res.tangent[np.ix_(free, free)], r)
    raise NonConvergenceError("mixed-control macro strain did not converge")


# =============================================================================
# Snapshots and trajectories
# =============================================================================
@dataclass
class SnapshotRecorder:
    """Converged fluctuation (x_u) and force-integrand (x_f) snapshots."""
    x_u: list = field(default_factory=list)
    x_f: list = field(default_factory=list)
    manifest: list = field(default_factory=list)

    def record(self, trajectory, increment, load_factor, w, f=None):
        self.x_u.append(np.asarray(w, dtype=float).copy())
        if f is not None:
            self.x_f.append(np.asarray(f, dtype=float).copy())
        self.manifest.append((trajectory, increment, float(load_factor)))

    @property
    def n_snapshots(self):
        return len(self.x_u)

    def matrix_u(self):
        return np.column_stack(self.x_u) if self.x_u else np.zeros((0, 0))

    def matrix_f(self):
        return np.column_stack(self.x_f) if self.x_f else np.zeros((0, 0))


def step_dt(dt, k):
    """Time increment of step ``k``: ``dt`` is None, a scalar or a sequence."""
    if dt is None or np.isscalar(dt):
        return dt
    return float(dt[k])


def monotonic_path(endpoint, n_steps=20):
    endpoint = np.asarray(endpoint, dtype=float)
    return [(i / n_steps) * endpoint for i in range(1, n_steps + 1)]


def run_trajectory(rve: Rve, path, recorder: SnapshotRecorder = None,
                   trajectory_id=0, dt=None, tol=1e-8, state=None):
    """Follow a strain path, bisecting failed increments up to 4 times.

    One snapshot column is recorded per path point. ``dt`` is a scalar or one
    time increment per path point.

    Returns
    -------
    recorder : SnapshotRecorder
    results : list of MicroResult
    """
    recorder = recorder if recorder is not None else SnapshotRecorder()
    state = state if state is not None else rve.initial_state()
    w = rve.zero_fluctuation()
    E_old = np.zeros(3)
    results = []
    n = len(path)
    for k, E_new in enumerate(path):
        E_new = np.asarray(E_new, dtype=float)
        res, state, w = _advance(rve, E_old, E_new, state, w,
                                 step_dt(dt, k), tol)
        E_old = E_new
        results.append(res)
        recorder.record(trajectory_id, k + 1, (k + 1) / n, res.w)
    return recorder, results


def _advance(rve, E_old, E_new, state, w, dt, tol, depth=0):
    try:
        res = rve.solve(E_new, state, w0=w, dt=dt, tol=tol)
        return res, res.state, res.w
    except NonConvergenceError:
        if depth >= MAX_BISECTIONS:
            raise
        log.debug("bisecting micro increment (depth %d)", depth + 1)
        E_mid = 0.5 * (E_old + E_new)
        h = None if dt is None else 0.5 * dt
        _, state, w = _advance(rve, E_old, E_mid, state, w, h, tol, depth + 1)
        return _advance(rve, E_mid, E_new, state, w, h, tol, depth + 1)
