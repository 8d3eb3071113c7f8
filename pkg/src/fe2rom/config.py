"""Run configuration: embedded defaults, YAML overrides and validation."""
from __future__ import annotations

import copy
import hashlib
import json
import re

import yaml

from .fe2 import METHODS
from .mesh import REFINEMENT_SIZES


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (1e-6)."""


_Loader.add_implicit_resolver(
    'tag:yaml.org,2002:float',
    re.compile(r'''^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$''', re.X),
    list('-+0123456789.'))


def parse_yaml(text):
    try:
        return yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc


DEFAULTS = {
    'output': 'fe2rom-run',
    'threads': 1,
    'rve': {
        'level': 'medium',
        'bc': 'linear',
        'inclusions': [[0.3, 0.3, 0.2], [0.7, 0.65, 0.2]],
        'pores': [[0.7, 0.22, 0.15]],
    },
    'materials': {
        'matrix': {'model': 'j2_linear', 'E': 1.0, 'nu': 0.3,
                   'sigma_y0': 0.01, 'h': 0.016},
        'inclusion': {'model': 'elastic', 'E': 10.0, 'nu': 0.3},
    },
    'macro': {'L': 4.0, 'H': 1.0, 'nx': 8, 'ny': 2},
    'load': {'U_max': 1.2, 'n_load': 20, 'n_unload': 20, 'unload': True},
    'training': {'strategy': 'clustered', 'k': 30, 'n_steps': 20,
                 'seed': 0, 'n_unspecific': 150, 'e11_fit': 0.05},
    'rom': {'n_modes': 12},
    'hyper': {'m_target': [85], 'tol': 1e-6, 'with_stress': True},
    'solver': {'macro_tol': 1e-6, 'micro_tol': 1e-8},
    'method': 'HyperROM',
    'mesh_study': {'levels': ['coarse', 'medium', 'fine', 'finest'],
                   'gamma': 0.04, 'n_steps': 20},
}

MATERIAL_MODELS = ('elastic', 'j2_linear', 'power_law', 'creep')


def _merge(base, over, path=''):
    out = copy.deepcopy(base)
    for key, val in (over or {}).items():
        if key not in base:
            raise ConfigError(f"unknown config field {path}{key}")
        if isinstance(base[key], dict) and key != 'materials':
            if not isinstance(val, dict):
                raise ConfigError(f"{path}{key} must be a mapping")
            out[key] = _merge(base[key], val, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None, overrides=None):
    """Defaults, updated by the YAML file at ``path`` and ``overrides``."""
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = parse_yaml(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
    cfg = _merge(DEFAULTS, data)
    for dotted, val in (overrides or {}).items():
        set_field(cfg, dotted, val)
    validate(cfg)
    return cfg


def set_field(cfg, dotted, value):
    keys = dotted.split('.')
    node = cfg
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"unknown config field {dotted}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config field {dotted}")
    node[keys[-1]] = value


def _positive(cfg, dotted, integer=False):
    node = cfg
    for k in dotted.split('.'):
        node = node[k]
    ok = isinstance(node, int) if integer else isinstance(node, (int, float))
    if isinstance(node, bool) or not ok or node <= 0:
        kind = 'positive integer' if integer else 'positive number'
        raise ConfigError(f"{dotted} must be a {kind}, got {node!r}")


def validate(cfg):
    if cfg['rve']['level'] not in REFINEMENT_SIZES:
        raise ConfigError(f"rve.level must be one of "
                          f"{sorted(REFINEMENT_SIZES)}")
    if cfg['rve']['bc'] not in ('linear', 'periodic'):
        raise ConfigError("rve.bc must be 'linear' or 'periodic'")
    for key in ('inclusions', 'pores'):
        for c in cfg['rve'][key]:
            if len(c) != 3:
                raise ConfigError(f"rve.{key} entries are [x, y, r]")
    mats = cfg['materials']
    if 'matrix' not in mats:
        raise ConfigError("materials.matrix is required")
    for name, m in mats.items():
        if name not in ('matrix', 'inclusion'):
            raise ConfigError(f"unknown material block {name}")
        if m.get('model') not in MATERIAL_MODELS:
            raise ConfigError(f"materials.{name}.model must be one of "
                              f"{MATERIAL_MODELS}")
    for f in ('macro.L', 'macro.H', 'load.U_max', 'solver.macro_tol',
              'solver.micro_tol', 'hyper.tol', 'training.e11_fit',
              'mesh_study.gamma'):
        _positive(cfg, f)
    for f in ('macro.nx', 'macro.ny', 'load.n_load', 'load.n_unload',
              'training.k', 'training.n_steps', 'training.n_unspecific',
              'rom.n_modes', 'threads', 'mesh_study.n_steps'):
        _positive(cfg, f, integer=True)
    if cfg['training']['strategy'] not in ('clustered', 'unspecific'):
        raise ConfigError("training.strategy must be clustered or "
                          "unspecific")
    m = cfg['hyper']['m_target']
    targets = m if isinstance(m, list) else [m]
    if not targets or any(isinstance(t, bool) or not isinstance(t, int)
                          or t < 1 for t in targets):
        raise ConfigError("hyper.m_target must be a positive integer or a "
                          "list of them")
    if cfg['method'] not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}")
    levels = cfg['mesh_study']['levels']
    if len(levels) < 2 or any(lv not in REFINEMENT_SIZES for lv in levels):
        raise ConfigError("mesh_study.levels needs at least two known levels")
    return cfg


def hyper_targets(cfg):
    m = cfg['hyper']['m_target']
    return list(m) if isinstance(m, list) else [m]


def config_hash(cfg, sections=None):
    """Hash of the config, restricted to ``sections`` when given."""
    data = cfg if sections is None else {k: cfg[k] for k in sections}
    blob = json.dumps(data, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
