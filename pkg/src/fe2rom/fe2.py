"""Macro finite-element driver and the two-scale coupling.

The macro problem is a plane-strain cantilever clamped on its left edge and
loaded by a prescribed vertical tip displacement ``U``; the reaction ``R`` is
the sum of the vertical tip forces. The constitutive response at every macro
integration point comes from a *point model*:

* :class:`SurrogatePoints` - a single-point material law,
* :class:`NestedHF` - fully converged RVE Newton solves per macro iteration,
* :class:`MonolithicHF` - one micro Newton update per macro iteration using
  the micro linearization of the previous iteration (micro and macro
  iterations converge jointly),
* :class:`ReducedPoints` - the reduced (optionally hyper-integrated) RVE,
  batched over all macro points.
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .materials import Material, MaterialState
from .mesh import Mesh, build_beam_mesh, fixed_dofs
from .rom import ReducedRve
from .rve import NonConvergenceError, Rve

log = logging.getLogger(__name__)

METHODS = ('HF_nested', 'HF_monolithic', 'ROM', 'HyperROM')
MAX_BISECTIONS = 4


class MacroNonConvergence(NonConvergenceError):
    pass


# =============================================================================
# Macro problem
# =============================================================================
class MacroProblem:
    """Cantilever with clamped ``left`` set and displaced ``tip`` set."""

    def __init__(self, mesh: Mesh, clamp_set='left', load_set='tip'):
        self.mesh = mesh
        B, w, _, x = mesh.geometry()
        self.B, self.weights, self.x_ip = B, w, x
        self.Bt_w = np.ascontiguousarray(B.transpose(0, 2, 1)) * w[:, None,
                                                                     None]
        self.ip_dofs = np.repeat(mesh.element_dofs(), mesh.n_points_per_element,
                                 axis=0)
        self.n_dofs = mesh.n_dofs
        clamp = fixed_dofs(mesh, clamp_set, (0, 1))
        self.load_dofs = fixed_dofs(mesh, load_set, (1,))
        self.prescribed = np.concatenate([clamp, self.load_dofs])
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.prescribed] = False
        self.free = np.flatnonzero(mask)
        # prescribed values per unit tip displacement
        self.unit = np.zeros(len(self.prescribed))
        self.unit[len(clamp):] = 1.0

    @classmethod
    def beam(cls, L=4.0, H=1.0, nx=8, ny=2):
        return cls(build_beam_mesh(L, H, nx, ny))

    @property
    def n_points(self):
        return len(self.weights)

    def strains(self, u):
        return np.matmul(self.B, u[self.ip_dofs][:, :, None])[:, :, 0]

    def assemble(self, stress, tangent):
        """Internal force vector and dense stiffness."""
        fe = np.matmul(self.Bt_w, stress[:, :, None])[:, :, 0]
        f = np.bincount(self.ip_dofs.reshape(-1), weights=fe.reshape(-1),
                        minlength=self.n_dofs)
        ke = np.matmul(np.matmul(self.Bt_w, tangent), self.B)
        K = np.zeros((self.n_dofs, self.n_dofs))
        d = self.ip_dofs
        np.add.at(K, (d[:, :, None], d[:, None, :]), ke)
        return f, K

    def reaction(self, f):
        return float(f[self.load_dofs].sum())


# =============================================================================
# Point models
# =============================================================================
@dataclass
class Evaluation:
    stress: np.ndarray          # (P, 3)
    tangent: np.ndarray         # (P, 3, 3)
    micro_iterations: int = 0
    micro_converged: bool = True


class PointModel:
    """Constitutive response of all macro integration points.

    ``start`` returns the committed data of the virgin state, ``trial``
    creates the per-step working copy, ``evaluate`` updates the working copy
    for new macro strains and ``commit`` turns it into committed data.
    """
    name = 'point'

    def start(self, n_points):
        raise NotImplementedError

    def trial(self, committed):
        raise NotImplementedError

    def evaluate(self, E, work, dt=None) -> Evaluation:
        raise NotImplementedError

    def commit(self, work):
        raise NotImplementedError


class SurrogatePoints(PointModel):
    """Single-point material law at every macro point."""
    name = 'surrogate'

    def __init__(self, material: Material):
        self.material = material

    def start(self, n_points):
        return MaterialState.zeros(n_points)

    def trial(self, committed):
        return {'start': committed, 'state': committed}

    def evaluate(self, E, work, dt=None):
        sig, C, st = self.material.update(E, work['start'], dt)
        work['state'] = st
        return Evaluation(sig, C, 0, True)

    def commit(self, work):
        return work['state']


class _HFPoints(PointModel):
    def __init__(self, rve: Rve, tol=1e-8, max_iter=25, threads=1):
        self.rve = rve
        self.tol = tol
        self.max_iter = max_iter
        self.threads = threads

    def start(self, n_points):
        return [dict(w=self.rve.zero_fluctuation(),
                     state=self.rve.initial_state(), cache=None)
                for _ in range(n_points)]

    def trial(self, committed):
        return [dict(start=c['state'], w=c['w'].copy(), state=c['state'],
                     cache=c['cache'], converged=True) for c in committed]

    def commit(self, work):
        return [dict(w=p['w'], state=p['state'], cache=p['cache'])
                for p in work]

    def _map(self, fn, items):
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as ex:
                return list(ex.map(fn, items))
        return [fn(x) for x in items]


class NestedHF(_HFPoints):
    """Fully converged micro Newton solve per macro iteration."""
    name = 'HF_nested'

    def evaluate(self, E, work, dt=None):
        def solve(args):
            Ep, p = args
            return self.rve.solve(Ep, p['start'], w0=p['w'], dt=dt,
                                  tol=self.tol, max_iter=self.max_iter)

        results = self._map(solve, list(zip(E, work)))
        its = 0
        for p, res in zip(work, results):
            p['w'], p['state'] = res.w, res.state
            its += res.iterations
        return Evaluation(np.array([r.stress for r in results]),
                          np.array([r.tangent for r in results]), its, True)


class MonolithicHF(_HFPoints):
    """Micro fields advance one Newton update per macro iteration.

    Each evaluation first applies the micro Newton correction
    ``dw = -K^-1 (r + G dE)`` from the stored linearization (``dE`` is the
    macro strain change since that linearization), then relinearizes. The
    returned stress is the condensed one, ``Sigma - G^T K^-1 r / |Omega|``,
    and the tangent is the condensed consistent tangent, so the macro Newton
    iteration is the exact Newton method for the coupled system.
    """
    name = 'HF_monolithic'

    def evaluate(self, E, work, dt=None):
        rve = self.rve

        def update(args):
            Ep, p = args
            w = p['w']
            if p['cache'] is not None:
                lu, G, r, E_lin = p['cache']
                rhs = r + G @ (Ep - E_lin)
                w = w - rve.expand(lu.solve(rhs))
            lin = rve.linearize(Ep, w, p['start'], dt)
            if not np.isfinite(lin.residual_norm):
                raise NonConvergenceError("non-finite micro residual")
            if rve.n_q:
                lu = rve.factorize(lin.K)
                X = lu.solve(np.column_stack([lin.G, lin.residual]))
                C = lin.mean_tangent - lin.G.T @ X[:, :3] / rve.volume
                S = lin.macro_stress - lin.G.T @ X[:, 3] / rve.volume
                cache = (lu, lin.G, lin.residual, Ep.copy())
            else:
                C, S, cache = lin.mean_tangent, lin.macro_stress, None
            ok = lin.residual_norm <= self.tol * lin.reference
            return w, lin.state, S, C, cache, ok

        results = self._map(update, list(zip(E, work)))
        ok_all = True
        for p, (w, st, _, _, cache, ok) in zip(work, results):
            p['w'], p['state'], p['cache'] = w, st, cache
            ok_all &= ok
        return Evaluation(np.array([r[2] for r in results]),
                          np.array([r[3] for r in results]), len(work),
                          bool(ok_all))


class ReducedPoints(PointModel):
    """Reduced RVE evaluated in one batch over all macro points."""

    def __init__(self, model: ReducedRve, name='ROM', tol=1e-8, max_iter=25):
        self.model = model
        self.name = name
        self.tol = tol
        self.max_iter = max_iter

    def start(self, n_points):
        return dict(alpha=np.zeros((n_points, self.model.n_modes)),
                    state=self.model.initial_state(n_points))

    def trial(self, committed):
        return dict(start=committed['state'], alpha=committed['alpha'].copy(),
                    state=committed['state'])

    def evaluate(self, E, work, dt=None):
        res = self.model.solve(E, work['start'], work['alpha'], dt, self.tol,
                               self.max_iter)
        work['alpha'], work['state'] = res.alpha, res.state
        return Evaluation(res.stress, res.tangent, res.point_iterations, True)

    def commit(self, work):
        return dict(alpha=work['alpha'], state=work['state'])


# =============================================================================
# Load program and output
# =============================================================================
@dataclass
class LoadProgram:
    """Tip displacements of the loading branch plus optional unloading.

    With ``unload`` set, the tip is moved back in steps of ``unload_step``
    until the reaction changes sign (at most down to ``-U_max``).
    """
    steps: List[float]
    unload: bool = False
    unload_step: Optional[float] = None
    dt: Optional[float] = None

    def __post_init__(self):
        d = np.diff(np.concatenate([[0.0], self.steps]))
        if len(d) and not (np.all(d >= 0) or np.all(d <= 0)):
            raise ValueError("load factors must be monotone within a branch")

    @classmethod
    def load_unload(cls, U_max, n_load=20, n_unload=20, dt=None):
        return cls(list(np.linspace(0, U_max, n_load + 1)[1:]), True,
                   U_max / n_unload, dt)

    @property
    def U_max(self):
        return float(np.max(np.abs(self.steps))) if self.steps else 0.0


@dataclass
class CurveOutput:
    """Force-displacement rows ``(U, R, t_wall, iters_macro, iters_micro)``.

    ``t_wall`` and ``iters_micro_total`` are cumulative; ``iters_macro`` is
    per step.
    """
    U: List[float] = field(default_factory=list)
    R: List[float] = field(default_factory=list)
    t_wall: List[float] = field(default_factory=list)
    iters_macro: List[int] = field(default_factory=list)
    iters_micro_total: List[int] = field(default_factory=list)
    U_residual: Optional[float] = None
    n_load_rows: int = 0
    method: str = ''

    def append(self, U, R, t, it_macro, it_micro):
        self.U.append(float(U))
        self.R.append(float(R))
        self.t_wall.append(float(t))
        self.iters_macro.append(int(it_macro))
        self.iters_micro_total.append(int(it_micro))

    @property
    def wall_time(self):
        return self.t_wall[-1] if self.t_wall else 0.0

    def to_csv(self, path):
        with open(path, 'w', newline='') as fh:
            wr = csv.writer(fh)
            wr.writerow(['U', 'R', 't_wall', 'iters_macro',
                         'iters_micro_total'])
            for row in zip(self.U, self.R, self.t_wall, self.iters_macro,
                           self.iters_micro_total):
                wr.writerow([repr(float(row[0])), repr(float(row[1])),
                             repr(float(row[2])), row[3], row[4]])

    @classmethod
    def from_csv(cls, path):
        out = cls()
        with open(path, newline='') as fh:
            for row in csv.DictReader(fh):
                out.append(float(row['U']), float(row['R']),
                           float(row['t_wall']), int(row['iters_macro']),
                           int(row['iters_micro_total']))
        out.n_load_rows = _loading_rows(out.U)
        out.U_residual = _zero_crossing(out.U, out.R, out.n_load_rows)
        return out


def _loading_rows(U):
    U = np.asarray(U)
    if len(U) < 2:
        return len(U)
    d = np.diff(U)
    back = np.flatnonzero(d < 0)
    return int(back[0]) + 1 if len(back) else len(U)


def _zero_crossing(U, R, start):
    for k in range(max(start, 1), len(U)):
        if R[k - 1] > 0.0 >= R[k]:
            t = R[k - 1] / (R[k - 1] - R[k])
            return float(U[k - 1] + t * (U[k] - U[k - 1]))
    return None


def curve_error(test: CurveOutput, ref: CurveOutput):
    """``max |R_test - R_ref| / max |R_ref|`` on a common U grid.

    Curves sampled at the same displacements are compared row by row over
    the common rows; otherwise the loading branches are compared after
    linear interpolation of the test curve onto the reference grid.
    """
    Ut, Rt = np.asarray(test.U), np.asarray(test.R)
    Ur, Rr = np.asarray(ref.U), np.asarray(ref.R)
    scale = np.max(np.abs(Rr)) if len(Rr) else 0.0
    if scale == 0.0:
        raise ValueError("reference curve has no load")
    n = min(len(Ut), len(Ur))
    if n and np.allclose(Ut[:n], Ur[:n], rtol=0, atol=1e-12 * np.max(
            np.abs(Ur[:n])) + 1e-300):
        return float(np.max(np.abs(Rt[:n] - Rr[:n])) / scale)
    nt, nr = _loading_rows(Ut), _loading_rows(Ur)
    Ut, Rt, Ur, Rr = Ut[:nt], Rt[:nt], Ur[:nr], Rr[:nr]
    lo, hi = max(Ut.min(), Ur.min()), min(Ut.max(), Ur.max())
    if hi <= lo:
        raise ValueError("curves have no overlapping U range")
    mask = (Ur >= lo) & (Ur <= hi)
    Ri = np.interp(Ur[mask], np.concatenate([[0.0], Ut]),
                   np.concatenate([[0.0], Rt]))
    return float(np.max(np.abs(Ri - Rr[mask])) / scale)


# =============================================================================
# Driver
# =============================================================================
@dataclass
class MacroState:
    u: np.ndarray
    U: float
    committed: object
    K: np.ndarray


class Fe2Solver:
    """Load stepping with Newton iterations and step bisection.

    Parameters
    ----------
    problem : MacroProblem
    model : PointModel
    tol : float
        Relative macro residual tolerance.
    """

    def __init__(self, problem: MacroProblem, model: PointModel, tol=1e-6,
                 max_iter=20, max_bisections=MAX_BISECTIONS):
        self.problem = problem
        self.model = model
        self.tol = tol
        self.max_iter = max_iter
        self.max_bisections = max_bisections
        self.micro_iterations = 0

    def initial_state(self):
        pb = self.problem
        committed = self.model.start(pb.n_points)
        work = self.model.trial(committed)
        ev = self.model.evaluate(np.zeros((pb.n_points, 3)), work)
        _, K = pb.assemble(ev.stress, ev.tangent)
        return MacroState(np.zeros(pb.n_dofs), 0.0, self.model.commit(work), K)

    def _newton(self, ms: MacroState, U_new, dt):
        pb, model = self.problem, self.model
        fr, pr = pb.free, pb.prescribed
        u = ms.u.copy()
        dU = (U_new - ms.U) * pb.unit
        u[pr] += dU
        if np.any(dU):
            K = ms.K
            u[fr] -= np.linalg.solve(K[np.ix_(fr, fr)], K[np.ix_(fr, pr)] @ dU)
        work = model.trial(ms.committed)
        micro = 0
        for it in range(self.max_iter + 1):
            ev = model.evaluate(pb.strains(u), work, dt)
            micro += ev.micro_iterations
            f, K = pb.assemble(ev.stress, ev.tangent)
            rn = np.linalg.norm(f[fr])
            ref = max(np.linalg.norm(f), 1e-300)
            if not np.isfinite(rn):
                break
            if rn <= self.tol * ref and ev.micro_converged:
                self.micro_iterations += micro
                return MacroState(u, U_new, model.commit(work), K), f, it
            if it == self.max_iter:
                break
            u[fr] -= np.linalg.solve(K[np.ix_(fr, fr)], f[fr])
        self.micro_iterations += micro
        raise MacroNonConvergence(
            f"macro Newton did not converge at U={U_new:.6g}", float(rn))

    def macro_step(self, ms: MacroState, U_new, dt=None, depth=0):
        """Advance to tip displacement ``U_new``, bisecting on failure.

        Returns the new macro state, the internal force vector and the
        number of macro iterations (summed over sub-steps).
        """
        try:
            return self._newton(ms, U_new, dt)
        except (NonConvergenceError, np.linalg.LinAlgError) as exc:
            if depth >= self.max_bisections:
                raise MacroNonConvergence(
                    f"step to U={U_new:.6g} failed after {depth} "
                    f"bisections: {exc}") from exc
            log.info("bisecting macro step to U=%.6g (depth %d)", U_new,
                     depth + 1)
            U_mid = 0.5 * (ms.U + U_new)
            h = None if dt is None else 0.5 * dt
            mid, _, i1 = self.macro_step(ms, U_mid, h, depth + 1)
            new, f, i2 = self.macro_step(mid, U_new, h, depth + 1)
            return new, f, i1 + i2

    def solve_program(self, program: LoadProgram, state=None):
        """Run ``program`` and return the force-displacement curve."""
        t0 = time.perf_counter()
        self.micro_iterations = 0
        out = CurveOutput(method=self.model.name)
        ms = state if state is not None else self.initial_state()
        for U in program.steps:
            ms, f, its = self.macro_step(ms, U, program.dt)
            out.append(U, self.problem.reaction(f),
                       time.perf_counter() - t0, its, self.micro_iterations)
        out.n_load_rows = len(out.U)
        if program.unload:
            step = program.unload_step or program.U_max / 20
            U = ms.U
            sign = np.sign(out.R[-1]) if out.R else 1.0
            while U > -program.U_max:
                U = U - step
                ms, f, its = self.macro_step(ms, U, program.dt)
                R = self.problem.reaction(f)
                out.append(U, R, time.perf_counter() - t0, its,
                           self.micro_iterations)
                if sign * R <= 0.0:
                    break
            out.U_residual = _zero_crossing(out.U, out.R, out.n_load_rows)
        self.final_state = ms
        return out


def point_model(method, rve=None, basis=None, rule=None, tol=1e-8,
                threads=1):
    """Point model for one of :data:`METHODS`."""
    if method == 'HF_nested':
        return NestedHF(rve, tol, threads=threads)
    if method == 'HF_monolithic':
        return MonolithicHF(rve, tol, threads=threads)
    if method == 'ROM':
        if basis is None:
            raise ValueError("ROM needs a reduced basis")
        return ReducedPoints(ReducedRve(rve, basis), 'ROM', tol)
    if method == 'HyperROM':
        if basis is None or rule is None:
            raise ValueError("HyperROM needs a basis and a cubature rule")
        return ReducedPoints(ReducedRve(rve, basis, rule.point_ids,
                                        rule.weights), 'HyperROM', tol)
    raise ValueError(f"unknown method {method!r}")


def solve_program(problem, model, program, tol=1e-6):
    return Fe2Solver(problem, model, tol).solve_program(program)


def plastic_fraction(model: PointModel, committed, threshold=0.0):
    """Share of micro integration points with non-zero equivalent strain."""
    if isinstance(model, ReducedPoints):
        eqv = committed['state'].eqv
    elif isinstance(model, _HFPoints):
        eqv = np.concatenate([c['state'].eqv for c in committed])
    else:
        eqv = committed.eqv
    return float(np.mean(eqv > threshold))
