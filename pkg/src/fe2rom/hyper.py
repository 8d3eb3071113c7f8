"""Empirical cubature: integration-point selection from force snapshots.

The integrand snapshots ``x_f`` hold, per converged training increment, the
weighted contribution ``w_i * f_i`` of every integration point to the reduced
generalized force. The integrands are compressed with a weighted SVD, a
constant function is appended so that the domain volume is integrated
exactly, and points are picked greedily by their correlation with the current
integration residual. After each pick the weights are refitted with a
non-negative least-squares solve.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .rom import ReducedBasis, ReducedRve, array_hash, integrands_from_stress
from .rve import NonConvergenceError, Rve, SnapshotRecorder, step_dt

log = logging.getLogger(__name__)

#: Row scaling that makes the constant (volume) condition effectively exact.
VOLUME_ROW_SCALE = 1e4


class CubatureWarning(UserWarning):
    pass


@dataclass
class CubatureRule:
    """Selected integration points and their positive weights."""
    point_ids: np.ndarray
    weights: np.ndarray
    residual: float = 0.0
    n_basis: int = 0

    def __post_init__(self):
        self.point_ids = np.asarray(self.point_ids, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=float)
        if len(np.unique(self.point_ids)) != len(self.point_ids):
            raise ValueError("duplicate cubature points")
        if np.any(self.weights <= 0.0):
            raise ValueError("cubature weights must be positive")

    @property
    def n_points(self):
        return len(self.point_ids)

    def hash(self):
        return array_hash(self.point_ids.astype(float), self.weights)

    @classmethod
    def full(cls, rve: Rve):
        return cls(np.arange(rve.n_points), rve.weights.copy(), 0.0, 0)


@dataclass
class ForceSnapshotBasis:
    """Orthonormal (weighted) integrand modes with the constant appended.

    ``U`` has shape (m, k) and orthonormal columns in the Euclidean sense;
    the basis functions at the points are ``U / sqrt(w)``.
    """
    U: np.ndarray
    singular_values: np.ndarray
    sqrt_w: np.ndarray

    @property
    def n_basis(self):
        return self.U.shape[1]

    @property
    def functions(self):
        return self.U / self.sqrt_w[:, None]

    @property
    def exact_integrals(self):
        return self.U.T @ self.sqrt_w


def integrand_matrix(x_f, weights):
    """Reshape stacked snapshots to per-point integrand values.

    ``x_f`` has shape (m * c, n_snap) with point-major stacking; the result
    has shape (m, c * n_snap) and holds the unweighted integrand values.
    """
    x_f = np.asarray(x_f, dtype=float)
    m = len(weights)
    if x_f.shape[0] % m:
        raise ValueError("x_f rows are not a multiple of the point count")
    c = x_f.shape[0] // m
    F = x_f.reshape(m, c, -1).reshape(m, -1)
    return F / np.asarray(weights)[:, None]


def force_snapshot_basis(x_f, weights, max_modes=None, svd_tol=1e-8):
    """Weighted SVD of the integrands plus the constant function.

    Modes are kept while the relative truncation error exceeds ``svd_tol``,
    at most ``max_modes - 1`` of them (one slot is reserved for the constant).
    """
    w = np.asarray(weights, dtype=float)
    sw = np.sqrt(w)
    Y = sw[:, None] * integrand_matrix(x_f, w)
    if not np.any(Y):
        U = np.zeros((len(w), 0))
        s = np.zeros(0)
    else:
        U, s, _ = np.linalg.svd(Y, full_matrices=False)
        energy = np.cumsum(s[::-1] ** 2)[::-1]        # tail energy from j on
        tail = np.sqrt(np.append(energy[1:], 0.0) / energy[0])
        k = int(np.argmax(tail <= svd_tol)) + 1 if np.any(tail <= svd_tol) \
            else len(s)
        k = min(k, int(np.sum(s > 1e-14 * s[0])))
        if max_modes is not None:
            k = min(k, max_modes - 1)
        U, s = U[:, :k], s[:k]
    # deflate the constant so it can be appended as the last column
    c = sw / np.linalg.norm(sw)
    if U.shape[1]:
        D = U - np.outer(c, c @ U)
        Q, t, _ = np.linalg.svd(D, full_matrices=False)
        U = Q[:, t > 1e-10]
    U = np.column_stack([U, c])
    return ForceSnapshotBasis(U, s, sw)


def ecm_select(x_f, weights, m_target, tol=1e-6, svd_tol=1e-8,
               max_modes=None):
    """Empirical cubature rule for the integrand snapshots ``x_f``.

    Parameters
    ----------
    x_f : ndarray, shape (m * c, n_snapshots)
        Point-major stacked integrand snapshots weighted by the full
        quadrature weights.
    weights : ndarray, shape (m,)
        Full quadrature weights.
    m_target : int
        Maximum number of points. With ``m_target >= m`` the full rule is
        returned.
    tol : float
        Relative integration residual at which the selection stops.
    max_modes : int, optional
        Cap on the integrand basis size (default ``m_target``).

    Returns
    -------
    CubatureRule
    """
    w = np.asarray(weights, dtype=float)
    m = len(w)
    if not np.any(x_f):
        raise ValueError("x_f is identically zero")
    if m_target >= m:
        return CubatureRule(np.arange(m), w.copy(), 0.0, 0)
    basis = force_snapshot_basis(x_f, w, max_modes or m_target, svd_tol)
    return _greedy(basis, w, m_target, tol)


def _greedy(basis, w, m_target, tol):
    G = basis.functions.T.copy()               # (k, m)
    b = basis.exact_integrals.copy()
    # scale the constant row (last) so volume is met almost exactly
    G[-1] *= VOLUME_ROW_SCALE
    b[-1] *= VOLUME_ROW_SCALE
    col_norm = np.linalg.norm(G, axis=0)
    col_norm[col_norm == 0.0] = 1.0
    # residuals are reported for the unscaled system
    unscale = np.ones(len(b))
    unscale[-1] = 1.0 / VOLUME_ROW_SCALE
    bnorm = np.linalg.norm(b * unscale)
    selected = []
    weights = np.zeros(0)
    r = b.copy()
    res = 1.0
    banned = np.zeros(G.shape[1], dtype=bool)   # picked and pruned at once
    for _ in range(G.shape[1]):
        if len(selected) >= m_target:
            break
        corr = (G.T @ r) / col_norm
        corr[selected] = -np.inf
        corr[banned] = -np.inf
        i = int(np.argmax(corr))
        if corr[i] <= 0.0:
            break
        selected.append(i)
        try:
            weights, _ = nnls(G[:, selected], b, maxiter=50 * len(selected))
        except RuntimeError as exc:
            raise ArithmeticError(f"NNLS failed: {exc}") from exc
        keep = weights > 0.0
        banned[i] = not keep[-1]
        selected = [p for p, k in zip(selected, keep) if k]
        weights = weights[keep]
        r = b - G[:, selected] @ weights
        res = np.linalg.norm(r * unscale) / bnorm
        if res <= tol:
            break
    if res > tol:
        warnings.warn(f"ECM residual {res:.2e} above tolerance {tol:.0e} with "
                      f"{len(selected)} points", CubatureWarning)
    order = np.argsort(selected)
    return CubatureRule(np.asarray(selected)[order], weights[order], res,
                        basis.n_basis)


def integration_residual(x_f, weights, rule: CubatureRule):
    """Worst relative error of the rule on the snapshot integrals.

    Every integrand component of every snapshot is integrated with the full
    rule and with the cubature rule. Converged reduced forces integrate to
    (nearly) zero, so the error of each column is measured relative to the
    norm of its point-wise weighted integrands.
    """
    x_f = np.asarray(x_f, dtype=float)
    F = integrand_matrix(x_f, weights)
    m = len(weights)
    c = x_f.shape[0] // m
    F = F.reshape(m, c, -1)
    full = np.einsum('i,icn->cn', weights, F)
    hyp = np.einsum('i,icn->cn', rule.weights, F[rule.point_ids])
    scale = np.linalg.norm(x_f, axis=0)
    scale[scale == 0.0] = 1.0
    return float(np.max(np.linalg.norm(hyp - full, axis=0) / scale))


# =============================================================================
# Training in reduced mode
# =============================================================================
def collect_force_snapshots(rve: Rve, basis: ReducedBasis, paths, dt=None,
                            tol=1e-8, with_stress=False):
    """Re-run training paths with the reduced model and record ``x_f``.

    Each converged increment contributes one column of point-major stacked
    integrands ``w BV^T sigma`` (``n_modes`` per point, plus the three stress
    components first when ``with_stress`` is set). ``dt`` is a scalar or one
    time increment per path point.

    Returns
    -------
    recorder : SnapshotRecorder
        ``x_f`` columns plus the reduced amplitudes (as ``x_u``).
    """
    model = ReducedRve(rve, basis)
    recorder = SnapshotRecorder()
    for t, path in enumerate(paths):
        state = model.initial_state()
        alpha = np.zeros((1, model.n_modes))
        E_old = np.zeros(3)
        for k, E_new in enumerate(path):
            res = _reduced_advance(model, E_old, np.asarray(E_new, float),
                                   state, alpha, step_dt(dt, k), tol)
            E_old = np.asarray(E_new, float)
            state, alpha = res.state, res.alpha
            f = integrands_from_stress(model, res.ip_stress, with_stress)
            recorder.record(t, k + 1, (k + 1) / len(path), alpha[0], f[0])
    return recorder


def _reduced_advance(model, E_old, E_new, state, alpha, dt, tol, depth=0):
    try:
        return model.solve(E_new[None], state, alpha, dt, tol)
    except NonConvergenceError:
        if depth >= 4:
            raise
        E_mid = 0.5 * (E_old + E_new)
        h = None if dt is None else 0.5 * dt
        mid = _reduced_advance(model, E_old, E_mid, state, alpha, h, tol,
                               depth + 1)
        return _reduced_advance(model, E_mid, E_new, mid.state, mid.alpha, h,
                                tol, depth + 1)


def hyper_model(rve: Rve, basis: ReducedBasis, rule: CubatureRule):
    """Reduced model integrated with the cubature rule only."""
    return ReducedRve(rve, basis, rule.point_ids, rule.weights)


def hyper_assemble(rve: Rve, basis: ReducedBasis, rule: CubatureRule, E,
                   alpha, states, dt=None):
    """Reduced residual and stiffness summed over the rule points only.

    Returns
    -------
    r : ndarray, shape (n_modes,)
    K : ndarray, shape (n_modes, n_modes)
    """
    model = hyper_model(rve, basis, rule)
    r, K, *_ = model.assemble(np.atleast_2d(E), np.atleast_2d(alpha), states,
                              dt)
    return r[0], K[0]
