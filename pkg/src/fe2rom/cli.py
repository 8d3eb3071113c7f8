"""Command-line entry point: ``fe2rom <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 artifact provenance mismatch.
"""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import pipeline
from .config import ConfigError, load_config, parse_yaml
from .fe2 import METHODS
from .io import ArtifactFormatError, ProvenanceError
from .materials import MaterialError
from .rom import RankError
from .rve import NonConvergenceError

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_PROVENANCE = 0, 2, 3, 4

log = logging.getLogger('fe2rom')


def build_parser():
    p = argparse.ArgumentParser(prog='fe2rom', description=__doc__.split(
        '\n')[0])
    p.add_argument('-c', '--config', help='YAML run configuration')
    p.add_argument('-o', '--output', help='artifact directory')
    p.add_argument('--threads', type=int, help='worker thread cap')
    p.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                   help='override a config field (dotted key, YAML value)')
    p.add_argument('-v', '--verbose', action='store_true')
    sub = p.add_subparsers(dest='command', required=True)
    sub.add_parser('mesh-study', help='pure-shear RVE refinement study')
    sub.add_parser('train', help='surrogate, clustering, training and POD')
    sub.add_parser('hyper', help='force snapshots and cubature selection')
    run = sub.add_parser('run', help='online FE2 run')
    run.add_argument('--method', choices=METHODS)
    sub.add_parser('report', help='cost/accuracy table of finished runs')
    return p


def _overrides(args):
    out = {}
    for item in args.set:
        if '=' not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split('=', 1)
        out[key.strip()] = parse_yaml(val)
    if args.output:
        out['output'] = args.output
    if args.threads is not None:
        out['threads'] = args.threads
    return out


def _exit_code(exc):
    cause = exc.cause if isinstance(exc, pipeline.StageError) else exc
    if isinstance(cause, (ConfigError, RankError)):
        return EXIT_CONFIG
    if isinstance(cause, (ProvenanceError, ArtifactFormatError)):
        return EXIT_PROVENANCE
    if isinstance(cause, (NonConvergenceError, MaterialError,
                          np.linalg.LinAlgError, ArithmeticError)):
        return EXIT_SOLVER
    return None


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else
                        logging.WARNING, format='%(levelname)s %(message)s')
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == 'mesh-study':
            for row in pipeline.cmd_mesh_study(cfg):
                print(f"{row['level']:8s} dofs={row['dofs']:6d} "
                      f"rel_error={row['rel_error']:.3e}")
        elif args.command == 'train':
            man = pipeline.cmd_train(cfg)
            print(f"trained {man['n_trajectories']} trajectories, "
                  f"{man['x_u_shape'][1]} snapshots, {man['n_modes']} modes "
                  f"in {man['offline_time']} s")
        elif args.command == 'hyper':
            man = pipeline.cmd_hyper(cfg)
            for m, r in man['rules'].items():
                print(f"m_target={m}: {r['n_points']} points, "
                      f"residual {r['residual']:.2e}")
        elif args.command == 'run':
            curve, row = pipeline.cmd_run(cfg, args.method)
            print(f"{row['method']}: {len(curve.U)} steps, online "
                  f"{row['online_time']} s, U_residual {row['U_residual']}")
        elif args.command == 'report':
            print(pipeline.cmd_report(cfg), end='')
    except Exception as exc:          # mapped to exit codes below
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"fe2rom: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
