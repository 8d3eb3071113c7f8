"""Training trajectories for the reduced basis.

Clustered training runs the macro problem once with a cheap power-law
surrogate fitted to the RVE, harvests the macro strains of the final step,
clusters their directions with k-means and turns the scaled cluster centres
into monotonic strain-driven RVE trajectories. The unspecific baseline draws
random directions instead.

Strain directions are compared in the tensor coordinates
``(e11, e22, sqrt(2) * e12)`` (``e12 = gamma12 / 2``), where the Euclidean
norm is the Frobenius norm of the plane-strain tensor.
"""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.optimize import least_squares

from .fe2 import Fe2Solver, LoadProgram, MacroProblem, SurrogatePoints
from .materials import (J2PowerLawHardening, MaterialState, PowerLawParams,
                        uniaxial_plane_strain)
from .rve import (NonConvergenceError, Rve, SnapshotRecorder, run_trajectory,
                  solve_mixed)

log = logging.getLogger(__name__)

_SQRT2 = np.sqrt(2.0)


class FitWarning(UserWarning):
    pass


def to_tensor_coords(E):
    """Voigt strains (e11, e22, gamma12) to Frobenius-isometric coordinates."""
    E = np.asarray(E, dtype=float)
    return np.stack([E[..., 0], E[..., 1], E[..., 2] / _SQRT2], axis=-1)


def from_tensor_coords(x):
    x = np.asarray(x, dtype=float)
    return np.stack([x[..., 0], x[..., 1], x[..., 2] * _SQRT2], axis=-1)


def frobenius_norm(E):
    return np.linalg.norm(to_tensor_coords(E), axis=-1)


# =============================================================================
# Surrogate
# =============================================================================
@dataclass
class SurrogateFit:
    params: PowerLawParams
    residual: float             # relative RMS misfit of the stress curve
    yielded: bool               # False when the fit never leaves elasticity
    e11: np.ndarray
    s11: np.ndarray
    e22: np.ndarray


def fit_powerlaw(e11, s11, e22, x0=None):
    """Least-squares power-law parameters for a uniaxial plane-strain curve.

    Both the axial stress and the lateral strain are matched so that the
    Poisson ratio is identified.

    Returns
    -------
    SurrogateFit
    """
    e11, s11, e22 = (np.asarray(a, dtype=float) for a in (e11, s11, e22))
    # elastic estimates from the first point
    ratio = -e22[0] / e11[0]
    nu0 = float(np.clip(ratio / (1.0 + ratio), 0.01, 0.49))
    E0 = float(s11[0] / e11[0] * (1.0 - nu0 ** 2))
    if x0 is None:
        lin = s11[0] / e11[0] * e11
        dev = np.abs(s11 - lin) > 1e-3 * np.abs(lin)
        k = int(np.argmax(dev)) if np.any(dev) else len(e11) - 1
        sy0 = max(float(s11[max(k - 1, 0)]) * 0.8, 1e-6 * E0)
        x0 = [E0, nu0, sy0, 0.1]
    s_scale = np.max(np.abs(s11))
    e_scale = np.max(np.abs(e22))

    def residual(x):
        model = J2PowerLawHardening(PowerLawParams(*x))
        s, e = uniaxial_plane_strain(model, e11)
        return np.concatenate([(s - s11) / s_scale, (e - e22) / e_scale])

    lo = [1e-8 * E0, 0.0, 1e-10 * E0, 0.0]
    hi = [np.inf, 0.499, np.inf, 1.0]
    x0 = np.clip(np.asarray(x0, dtype=float), lo, hi)
    sol = least_squares(residual, x0, bounds=(lo, hi), x_scale='jac',
                        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
    params = PowerLawParams(*sol.x)
    model = J2PowerLawHardening(params)
    s, _ = uniaxial_plane_strain(model, e11)
    yielded = _yields(model, e11)
    rms = float(np.sqrt(np.mean((s - s11) ** 2)) / s_scale)
    return SurrogateFit(params, rms, yielded, e11, s11, e22)


def _yields(model, e11):
    """Whether the uniaxial path ends beyond the elastic range."""
    _, e22 = uniaxial_plane_strain(model, e11)
    eps = np.array([[e11[-1], e22[-1], 0.0]])
    _, _, st = model.update(eps, MaterialState.zeros(1))
    return bool(st.eqv[0] > 0.0)


def fit_surrogate(rve: Rve, e11_max=0.05, n_steps=20, max_residual=0.02):
    """Fit a power-law J2 surrogate to the RVE's uniaxial response.

    The RVE is driven in mixed control: ``E11`` is prescribed in
    ``n_steps`` equal increments up to ``e11_max`` while ``Sigma22`` and
    ``Sigma12`` are held at zero.

    Warns with :class:`FitWarning` when the relative misfit exceeds
    ``max_residual`` or when the fitted law never yields on the path.
    """
    state = rve.initial_state()
    w = None
    E = np.zeros(3)
    mask = np.array([True, False, False])
    e11 = e11_max * np.arange(1, n_steps + 1) / n_steps
    s11, e22 = [], []
    for v in e11:
        E[0] = v
        E, res = solve_mixed(rve, E, mask, np.zeros(3), state, w)
        state, w = res.state, res.w
        s11.append(res.stress[0])
        e22.append(E[1])
    fit = fit_powerlaw(e11, s11, e22)
    if fit.residual > max_residual:
        warnings.warn(f"surrogate misfit {fit.residual:.3g} above "
                      f"{max_residual}", FitWarning)
    if not fit.yielded:
        warnings.warn("surrogate does not yield on the fitting path; yield "
                      "stress is only bounded from below", FitWarning)
    return fit


# =============================================================================
# Surrogate macro run and strain harvesting
# =============================================================================
@dataclass
class StrainSampleSet:
    """Macro strains (Voigt) at every macro integration point."""
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite strain samples")

    @property
    def norms(self):
        return frobenius_norm(self.samples)

    @property
    def max_norm(self):
        return float(self.norms.max()) if len(self.samples) else 0.0

    def __len__(self):
        return len(self.samples)


def run_surrogate_macro(problem: MacroProblem, params: PowerLawParams,
                        program: LoadProgram, tol=1e-8):
    """Single-scale run with the surrogate; strains of the final step."""
    solver = Fe2Solver(problem, SurrogatePoints(J2PowerLawHardening(params)),
                       tol)
    curve = solver.solve_program(program)
    samples = StrainSampleSet(problem.strains(solver.final_state.u))
    return samples, curve


# =============================================================================
# k-means
# =============================================================================
@dataclass
class ClusterSet:
    """Unit strain directions and their endpoints scaled by ``max_norm``."""
    centroids: np.ndarray           # (k, 3) Voigt, unit Frobenius norm
    max_norm: float
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    objective: List[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def k(self):
        return len(self.centroids)

    @property
    def scaled_endpoints(self):
        return self.centroids * self.max_norm


def _kmeans_pp(X, k, rng):
    n = len(X)
    centers = [int(rng.integers(n))]
    d2 = np.sum((X - X[centers[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0.0:
            i = int(rng.choice(n, p=d2 / total))
        else:
            i = int(rng.integers(n))
        centers.append(i)
        d2 = np.minimum(d2, np.sum((X - X[i]) ** 2, axis=1))
    return X[centers].copy()


def _assign(X, C):
    d2 = np.sum((X[:, None, :] - C[None, :, :]) ** 2, axis=2)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(X)), labels]


def kmeans_cluster(samples, k=30, seed=0, max_iter=100):
    """Cluster the strain directions of ``samples`` into ``k`` groups.

    Samples are normalized to unit Frobenius norm (zero strains are
    dropped), seeded with k-means++ and refined by Lloyd iterations until the
    assignment no longer changes. A cluster that becomes empty is re-seeded
    at the sample farthest from its centre.

    Parameters
    ----------
    samples : StrainSampleSet or array_like, shape (n, 3)
    k : int
    seed : int

    Returns
    -------
    ClusterSet
    """
    S = samples if isinstance(samples, StrainSampleSet) else \
        StrainSampleSet(samples)
    X = to_tensor_coords(S.samples)
    norms = np.linalg.norm(X, axis=1)
    keep = norms > 1e-14 * max(norms.max(initial=0.0), 1e-300)
    X = X[keep] / norms[keep, None]
    if len(X) < k:
        raise ValueError(f"{len(X)} non-zero samples for {k} clusters")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, k, rng)
    labels, d2 = _assign(X, C)
    history = [float(d2.sum())]
    it = 0
    for it in range(1, max_iter + 1):
        for j in range(k):
            members = labels == j
            if np.any(members):
                C[j] = X[members].mean(axis=0)
            else:
                far = int(np.argmax(d2))
                C[j] = X[far]
                labels[far] = j
                d2[far] = 0.0
        new, d2 = _assign(X, C)
        history.append(float(d2.sum()))
        if np.array_equal(new, labels):
            break
        labels = new
    cn = np.linalg.norm(C, axis=1)
    cn[cn == 0.0] = 1.0
    centroids = from_tensor_coords(C / cn[:, None])
    full_labels = -np.ones(len(S), dtype=np.int64)
    full_labels[keep] = labels
    return ClusterSet(centroids, S.max_norm, full_labels, history, it)


# =============================================================================
# Trajectories
# =============================================================================
@dataclass
class TrainingTrajectory:
    """A training load path.

    ``monotonic``: strain-driven, step ``i`` applies ``(i / n) * endpoint``.
    ``hold``: stress-driven ramp to ``endpoint`` (read as a macro stress)
    over ``t_ramp`` followed by a hold until ``t_end``.
    """
    endpoint: np.ndarray
    n_steps: int = 20
    kind: str = 'monotonic'
    t_ramp: float = 1.0
    t_end: float = 7200.0
    n_ramp: int = 5

    def __post_init__(self):
        self.endpoint = np.asarray(self.endpoint, dtype=float).reshape(3)
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.kind not in ('monotonic', 'hold'):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.kind == 'hold' and not 1 <= self.n_ramp < self.n_steps:
            raise ValueError("hold pattern needs 1 <= n_ramp < n_steps")

    def path(self):
        if self.kind == 'monotonic':
            return [(i / self.n_steps) * self.endpoint
                    for i in range(1, self.n_steps + 1)]
        return [f * self.endpoint for f in self.load_factors()]

    def times(self):
        """Time grid (starting at 0) of the hold pattern."""
        ramp = np.linspace(0.0, self.t_ramp, self.n_ramp + 1)
        hold = np.geomspace(self.t_ramp, self.t_end,
                            self.n_steps - self.n_ramp + 1)
        return np.concatenate([ramp, hold[1:]])

    def load_factors(self):
        t = self.times()[1:]
        return np.minimum(t / self.t_ramp, 1.0)


def clustered_training(clusters: ClusterSet, n_steps=20):
    return [TrainingTrajectory(e, n_steps) for e in clusters.scaled_endpoints]


def build_unspecific_training(n, max_norm, seed=0, n_steps=20):
    """``n`` monotonic trajectories along random directions.

    Directions are uniform on the unit Frobenius sphere; every endpoint has
    Frobenius norm ``max_norm``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 3))
    X /= np.linalg.norm(X, axis=1)[:, None]
    return [TrainingTrajectory(e, n_steps)
            for e in from_tensor_coords(X) * max_norm]


def run_hold_trajectory(rve: Rve, traj: TrainingTrajectory,
                        recorder: Optional[SnapshotRecorder] = None,
                        trajectory_id=0, tol=1e-8):
    """Stress-controlled ramp-and-hold RVE run.

    Returns the recorder, the macro strains and the converged states.
    """
    recorder = recorder if recorder is not None else SnapshotRecorder()
    state = rve.initial_state()
    w = None
    E = np.zeros(3)
    mask = np.zeros(3, dtype=bool)
    times = traj.times()
    strains, states = [], []
    for k, (f, dt) in enumerate(zip(traj.load_factors(), np.diff(times))):
        E, res = solve_mixed(rve, E, mask, f * traj.endpoint, state, w,
                             dt=dt, tol=tol)
        state, w = res.state, res.w
        strains.append(E.copy())
        states.append(state)
        recorder.record(trajectory_id, k + 1, f, w)
    return recorder, np.array(strains), states


def run_training(rve: Rve, trajectories, threads=1, tol=1e-8):
    """Run all trajectories and collect the fluctuation snapshots.

    Trajectories are independent; with ``threads > 1`` they run
    concurrently and the snapshots are merged in trajectory order.
    """
    def one(args):
        i, traj = args
        rec = SnapshotRecorder()
        if traj.kind == 'hold':
            run_hold_trajectory(rve, traj, rec, i, tol)
        else:
            run_trajectory(rve, traj.path(), rec, i, tol=tol)
        return rec

    items = list(enumerate(trajectories))
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(one, items))
    else:
        parts = [one(x) for x in items]
    out = SnapshotRecorder()
    for rec in parts:
        out.x_u.extend(rec.x_u)
        out.manifest.extend(rec.manifest)
    return out


def training_paths(trajectories):
    """Strain paths of monotonic trajectories (for reduced re-runs)."""
    return [t.path() for t in trajectories if t.kind == 'monotonic']


__all__ = [
    'ClusterSet', 'FitWarning', 'StrainSampleSet', 'SurrogateFit',
    'TrainingTrajectory', 'build_unspecific_training', 'clustered_training',
    'fit_powerlaw', 'fit_surrogate', 'frobenius_norm', 'from_tensor_coords',
    'kmeans_cluster', 'run_hold_trajectory', 'run_surrogate_macro',
    'run_training', 'to_tensor_coords', 'training_paths',
    'NonConvergenceError',
]
