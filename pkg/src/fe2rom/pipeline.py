"""Offline/online pipeline stages operating on an artifact directory.

Layout of the output directory::

    train/   surrogate.json clusters.txt trajectories.txt x_u.bin basis.bin
             train.json
    hyper/   x_f.bin rule_<m>.txt hyper.json
    run/     curve_<method>.csv run_<method>.json
    report.txt mesh_study/

Every manifest records the hashes of its inputs so that an online run can
verify the chain config -> clusters -> x_u -> basis -> x_f -> rule.
"""
from __future__ import annotations

import contextlib
import logging
import time
from pathlib import Path

import numpy as np

from . import io
from .config import config_hash, hyper_targets
from .fe2 import (CurveOutput, Fe2Solver, LoadProgram, MacroProblem,
                  curve_error, plastic_fraction, point_model)
from .hyper import collect_force_snapshots, ecm_select
from .materials import (CreepParams, ElasticParams, J2LinearParams,
                        PowerLawParams, make_material)
from .mesh import INCLUSION, MATRIX, Circle, RveGeometry, build_rve_mesh
from .rom import array_hash, build_elastic_modes, pod
from .rve import Rve, monotonic_path, run_trajectory
from .training import (build_unspecific_training, clustered_training,
                       fit_surrogate, kmeans_cluster, run_surrogate_macro,
                       run_training, training_paths)

log = logging.getLogger(__name__)

TRAIN_SECTIONS = ('rve', 'materials', 'macro', 'load', 'training', 'rom')
HYPER_SECTIONS = TRAIN_SECTIONS + ('hyper',)


class StageError(RuntimeError):
    """Failure inside a named pipeline stage; ``cause`` is the original."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _fmt(t):
    return float(f"{t:.3g}")


# =============================================================================
# Builders
# =============================================================================
def material_from_block(block):
    kind = block['model']
    el = ElasticParams(block['E'], block['nu'])
    if kind == 'elastic':
        return make_material(el)
    if kind == 'j2_linear':
        return make_material(J2LinearParams(el, block['sigma_y0'],
                                            block['h']))
    if kind == 'power_law':
        return make_material(PowerLawParams(block['E'], block['nu'],
                                            block['sigma_y0'], block['N']))
    if kind == 'creep':
        return make_material(CreepParams(block['E'], block['nu'], block['A'],
                                         block['n'], block['m']))
    raise ValueError(f"unknown material model {kind!r}")


def build_geometry(cfg):
    r = cfg['rve']
    return RveGeometry(tuple(Circle(*c) for c in r['inclusions']),
                       tuple(Circle(*c) for c in r['pores']))


def build_rve(cfg, level=None):
    mats = cfg['materials']
    materials = {MATRIX: material_from_block(mats['matrix'])}
    if 'inclusion' in mats:
        materials[INCLUSION] = material_from_block(mats['inclusion'])
    mesh = build_rve_mesh(build_geometry(cfg), level or cfg['rve']['level'])
    return Rve(mesh, materials, cfg['rve']['bc'])


def build_problem(cfg):
    m = cfg['macro']
    return MacroProblem.beam(m['L'], m['H'], m['nx'], m['ny'])


def build_program(cfg):
    ld = cfg['load']
    if ld['unload']:
        return LoadProgram.load_unload(ld['U_max'], ld['n_load'],
                                       ld['n_unload'])
    return LoadProgram(list(np.linspace(0, ld['U_max'],
                                        ld['n_load'] + 1)[1:]))


class Workspace:
    def __init__(self, root):
        self.root = Path(root)
        for sub in ('train', 'hyper', 'run', 'mesh_study'):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def __getattr__(self, name):
        if name in ('train', 'hyper', 'run', 'mesh_study'):
            return self.root / name
        raise AttributeError(name)


def _require(path):
    if not Path(path).exists():
        raise io.ProvenanceError(f"missing artifact {path}")
    return path


# =============================================================================
# Stages
# =============================================================================
def cmd_mesh_study(cfg):
    """Pure-shear RVE response on several refinement levels.

    Writes one stress-strain CSV per level and returns the table of relative
    errors against the finest level.
    """
    ws = Workspace(cfg['output'])
    ms = cfg['mesh_study']
    path = monotonic_path([0.0, 0.0, ms['gamma']], ms['n_steps'])
    curves = {}
    for level in ms['levels']:
        with stage(f"mesh-study:{level}"):
            rve = build_rve(cfg, level)
            _, results = run_trajectory(rve, path,
                                        tol=cfg['solver']['micro_tol'])
            s12 = np.array([r.stress[2] for r in results])
            curves[level] = s12
            np.savetxt(ws.mesh_study / f"shear_{level}.csv",
                       np.column_stack([[p[2] for p in path], s12]),
                       delimiter=',', header='gamma12,Sigma12', comments='',
                       fmt='%.17g')
    ref = curves[ms['levels'][-1]]
    rows = []
    for level in ms['levels']:
        rve_dofs = build_rve_mesh(build_geometry(cfg), level).n_dofs
        err = float(np.max(np.abs(curves[level] - ref)) / np.max(np.abs(ref)))
        rows.append(dict(level=level, dofs=rve_dofs, rel_error=err))
    with open(ws.mesh_study / "errors.csv", 'w') as fh:
        fh.write("level,dofs,rel_error\n")
        for r in rows:
            fh.write(f"{r['level']},{r['dofs']},{r['rel_error']!r}\n")
    return rows


def cmd_train(cfg):
    """Surrogate fit, surrogate macro run, clustering, training, POD."""
    ws = Workspace(cfg['output'])
    tr = cfg['training']
    t0 = time.perf_counter()
    with stage('rve'):
        rve = build_rve(cfg)
    with stage('fit_surrogate'):
        fit = fit_surrogate(rve, tr['e11_fit'])
        p = fit.params
        io.write_json(ws.train / 'surrogate.json',
                      dict(E=p.E, nu=p.nu, sigma_y0=p.sigma_y0, N=p.N,
                           residual=fit.residual, yielded=fit.yielded))
    with stage('run_surrogate_macro'):
        ld = cfg['load']
        program = LoadProgram(list(np.linspace(0, ld['U_max'],
                                               ld['n_load'] + 1)[1:]))
        samples, _ = run_surrogate_macro(build_problem(cfg), fit.params,
                                         program)
    with stage('kmeans_cluster'):
        clusters = kmeans_cluster(samples, tr['k'], tr['seed'])
        io.write_clusters(ws.train / 'clusters.txt', clusters)
    if tr['strategy'] == 'clustered':
        trajectories = clustered_training(clusters, tr['n_steps'])
    else:
        trajectories = build_unspecific_training(
            tr['n_unspecific'], samples.max_norm, tr['seed'], tr['n_steps'])
    io.write_trajectories(ws.train / 'trajectories.txt', trajectories)
    with stage('run_trajectory'):
        rec = run_training(rve, trajectories, cfg['threads'],
                           cfg['solver']['micro_tol'])
        X = rec.matrix_u()
        io.write_snapshots(ws.train / 'x_u.bin', X, rec.manifest)
    with stage('pod'):
        modes, _ = build_elastic_modes(rve)
        basis = pod(X, cfg['rom']['n_modes'], modes)
        io.write_basis(ws.train / 'basis.bin', basis)
    elapsed = time.perf_counter() - t0
    manifest = dict(
        config_hash=config_hash(cfg, TRAIN_SECTIONS),
        strategy=tr['strategy'], n_trajectories=len(trajectories),
        clusters_hash=io.file_hash(ws.train / 'clusters.txt'),
        x_u_hash=array_hash(X), x_u_shape=list(X.shape),
        basis_hash=basis.hash(), n_modes=basis.n_modes,
        offline_time=_fmt(elapsed))
    io.write_json(ws.train / 'train.json', manifest)
    return manifest


def load_basis(cfg):
    ws = Workspace(cfg['output'])
    man = io.read_json(_require(ws.train / 'train.json'))
    if man['config_hash'] != config_hash(cfg, TRAIN_SECTIONS):
        raise io.ProvenanceError("training artifacts were produced with a "
                                 "different configuration")
    basis = io.read_basis(_require(ws.train / 'basis.bin'))
    if basis.hash() != man['basis_hash']:
        raise io.ProvenanceError("basis does not match the training manifest")
    return basis, man


def cmd_hyper(cfg):
    """Reduced re-run of the training paths, x_f collection and ECM."""
    ws = Workspace(cfg['output'])
    t0 = time.perf_counter()
    basis, train_man = load_basis(cfg)
    with stage('rve'):
        rve = build_rve(cfg)
    trajectories = io.read_trajectories(_require(ws.train /
                                                 'trajectories.txt'))
    hy = cfg['hyper']
    with stage('collect_force_snapshots'):
        rec = collect_force_snapshots(rve, basis, training_paths(trajectories),
                                      tol=cfg['solver']['micro_tol'],
                                      with_stress=hy['with_stress'])
        xf = rec.matrix_f()
        io.write_snapshots(ws.hyper / 'x_f.bin', xf, rec.manifest)
    xf_hash = array_hash(xf)
    rules = {}
    with stage('ecm_select'):
        for m in hyper_targets(cfg):
            rule = ecm_select(xf, rve.weights, m, hy['tol'])
            path = ws.hyper / f"rule_{m}.txt"
            io.write_rule(path, rule, basis.hash(), xf_hash)
            rules[str(m)] = dict(file=path.name, hash=rule.hash(),
                                 n_points=rule.n_points,
                                 residual=rule.residual)
    elapsed = time.perf_counter() - t0
    manifest = dict(config_hash=config_hash(cfg, HYPER_SECTIONS),
                    basis_hash=basis.hash(), x_f_hash=xf_hash,
                    x_f_shape=list(xf.shape), rules=rules,
                    n_full_points=rve.n_points,
                    offline_time=_fmt(elapsed))
    io.write_json(ws.hyper / 'hyper.json', manifest)
    return manifest


def load_rule(cfg, basis):
    ws = Workspace(cfg['output'])
    man = io.read_json(_require(ws.hyper / 'hyper.json'))
    if man['config_hash'] != config_hash(cfg, HYPER_SECTIONS):
        raise io.ProvenanceError("hyper artifacts were produced with a "
                                 "different configuration")
    if man['basis_hash'] != basis.hash():
        raise io.ProvenanceError("cubature rule was built for another basis")
    m = str(hyper_targets(cfg)[-1])
    entry = man['rules'][m]
    rule, header = io.read_rule(_require(ws.hyper / entry['file']))
    if rule.hash() != entry['hash'] or header.get('basis') != basis.hash():
        raise io.ProvenanceError("cubature rule does not match its manifest")
    return rule, man


def cmd_run(cfg, method=None):
    """Online FE2 run; writes the curve, a run manifest and a table row."""
    method = method or cfg['method']
    ws = Workspace(cfg['output'])
    basis = rule = None
    chain = dict(config_hash=config_hash(cfg))
    offline = dict(rom=0.0, hyper=0.0)
    if method in ('ROM', 'HyperROM'):
        basis, tman = load_basis(cfg)
        chain.update(clusters=tman['clusters_hash'], x_u=tman['x_u_hash'],
                     basis=tman['basis_hash'])
        offline['rom'] = tman['offline_time']
    if method == 'HyperROM':
        rule, hman = load_rule(cfg, basis)
        chain.update(x_f=hman['x_f_hash'], rule=rule.hash())
        offline['hyper'] = hman['offline_time']
    with stage('rve'):
        rve = build_rve(cfg)
    problem = build_problem(cfg)
    model = point_model(method, rve, basis, rule, cfg['solver']['micro_tol'],
                        cfg['threads'])
    with stage(f"run:{method}"):
        solver = Fe2Solver(problem, model, cfg['solver']['macro_tol'])
        curve = solver.solve_program(build_program(cfg))
    curve.to_csv(ws.run / f"curve_{method}.csv")
    n_ip = problem.n_points
    if method in ('HF_nested', 'HF_monolithic'):
        micro_dofs, micro_ips = rve.n_dofs, rve.n_points
    elif method == 'ROM':
        micro_dofs, micro_ips = basis.n_modes, rve.n_points
    else:
        micro_dofs, micro_ips = basis.n_modes, rule.n_points
    row = dict(method=method,
               dofs=problem.n_dofs + n_ip * micro_dofs,
               ips=n_ip * micro_ips,
               ip_fraction=micro_ips / rve.n_points,
               online_time=_fmt(curve.wall_time),
               offline_rom=offline['rom'], offline_hyper=offline['hyper'],
               U_residual=curve.U_residual,
               plastic_fraction=plastic_fraction(
                   model, solver.final_state.committed))
    io.write_json(ws.run / f"run_{method}.json",
                  dict(row=row, provenance=chain, config=cfg))
    return curve, row


def cmd_report(cfg):
    """Table of cost and accuracy over the finished runs."""
    ws = Workspace(cfg['output'])
    rows, curves = [], {}
    for method in ('HF_nested', 'HF_monolithic', 'ROM', 'HyperROM'):
        path = ws.run / f"run_{method}.json"
        if path.exists():
            rows.append(io.read_json(path)['row'])
            curves[method] = _curve(ws, method)
    if not rows:
        raise io.ProvenanceError("no finished runs to report")
    ref = curves.get('HF_nested')
    lines = [f"{'':18s}" + ''.join(f"{r['method']:>16s}" for r in rows)]

    def line(label, values):
        lines.append(f"{label:18s}" + ''.join(f"{v:>16s}" for v in values))

    line('DOFs', [f"{r['dofs']:,}" for r in rows])
    line('IPs', [f"{r['ips']:,} ({100 * r['ip_fraction']:.0f}%)"
                 for r in rows])
    line('online time [s]', [f"{r['online_time']:.3g}" for r in rows])
    line('offline ROM [s]', [f"{r['offline_rom']:.3g}" if r['offline_rom']
                             else '-' for r in rows])
    line('offline hyper [s]', [f"{r['offline_hyper']:.3g}"
                               if r['offline_hyper'] else '-' for r in rows])
    line('U_residual', [f"{r['U_residual']:.4g}" if r['U_residual']
                        is not None else '-' for r in rows])
    if ref is not None:
        line('error vs HF', [f"{curve_error(curves[r['method']], ref):.2e}"
                             for r in rows])
    text = '\n'.join(lines) + '\n'
    (ws.root / 'report.txt').write_text(text)
    return text


def _curve(ws, method):
    return CurveOutput.from_csv(ws.run / f"curve_{method}.csv")
