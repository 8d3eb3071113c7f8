"""Artifact persistence: snapshot containers, bases, rules, tables, manifests.

Snapshot matrices use a small binary container: an 8-byte magic, the row
and column counts as little-endian uint64 and the entries as column-major
little-endian float64. A text manifest next to it holds one line per column
(trajectory id, increment, load factor).
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .hyper import CubatureRule
from .rom import ReducedBasis
from .training import ClusterSet, TrainingTrajectory

MAGIC = b'FE2SNAP1'


class ProvenanceError(RuntimeError):
    """An artifact does not match the inputs it claims to derive from."""


class ArtifactFormatError(ValueError):
    pass


def file_hash(path):
    h = hashlib.sha256()
    with open(path, 'rb') as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()[:16]


# =============================================================================
# Snapshot container
# =============================================================================
def write_matrix(path, X):
    X = np.asarray(X, dtype='<f8')
    if X.ndim != 2:
        raise ValueError("matrix must be two-dimensional")
    with open(path, 'wb') as fh:
        fh.write(MAGIC)
        fh.write(np.array(X.shape, dtype='<u8').tobytes())
        fh.write(np.asfortranarray(X).tobytes(order='F'))


def read_matrix(path):
    with open(path, 'rb') as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ArtifactFormatError(f"{path}: not a snapshot container")
        rows, cols = np.frombuffer(fh.read(16), dtype='<u8')
        data = np.frombuffer(fh.read(), dtype='<f8')
    if data.size != rows * cols:
        raise ArtifactFormatError(f"{path}: truncated container")
    return data.reshape((int(rows), int(cols)), order='F').copy()


def write_snapshots(path, X, manifest):
    """Matrix plus ``<path>.manifest`` with one line per column."""
    X = np.asarray(X)
    if len(manifest) != X.shape[1]:
        raise ValueError("manifest length differs from column count")
    write_matrix(path, X)
    with open(f"{path}.manifest", 'w') as fh:
        fh.write("# trajectory increment load_factor\n")
        for t, i, f in manifest:
            fh.write(f"{int(t)} {int(i)} {float(f)!r}\n")


def read_snapshots(path):
    X = read_matrix(path)
    manifest = []
    with open(f"{path}.manifest") as fh:
        for line in fh:
            if line.startswith('#') or not line.strip():
                continue
            t, i, f = line.split()
            manifest.append((int(t), int(i), float(f)))
    if len(manifest) != X.shape[1]:
        raise ArtifactFormatError(f"{path}: manifest/column mismatch")
    return X, manifest


# =============================================================================
# Basis and rule
# =============================================================================
def write_basis(path, basis: ReducedBasis):
    write_matrix(path, basis.V)
    meta = dict(n_modes=basis.n_modes,
                elastic_mode_count=basis.elastic_mode_count,
                degenerate=basis.degenerate, source_hash=basis.source_hash,
                hash=basis.hash(),
                singular_values=[float(s) for s in basis.singular_values])
    Path(f"{path}.json").write_text(json.dumps(meta, indent=1))


def read_basis(path):
    V = read_matrix(path)
    meta = json.loads(Path(f"{path}.json").read_text())
    basis = ReducedBasis(V, np.array(meta['singular_values']),
                         meta['elastic_mode_count'], meta['degenerate'],
                         meta['source_hash'])
    if basis.hash() != meta['hash']:
        raise ProvenanceError(f"{path}: basis content does not match its "
                              "recorded hash")
    return basis


def write_rule(path, rule: CubatureRule, basis_hash='', snapshot_hash=''):
    with open(path, 'w') as fh:
        fh.write(f"# basis {basis_hash} snapshots {snapshot_hash} "
                 f"residual {float(rule.residual)!r} n_basis {rule.n_basis}\n")
        for i, w in zip(rule.point_ids, rule.weights):
            fh.write(f"{int(i)} {float(w)!r}\n")


def read_rule(path):
    """Returns the rule and the header fields."""
    header = {}
    ids, weights = [], []
    with open(path) as fh:
        for line in fh:
            if line.startswith('#'):
                tok = line[1:].split()
                header = dict(zip(tok[::2], tok[1::2]))
                continue
            if line.strip():
                i, w = line.split()
                ids.append(int(i))
                weights.append(float(w))
    rule = CubatureRule(np.array(ids), np.array(weights),
                        float(header.get('residual', 0.0)),
                        int(header.get('n_basis', 0)))
    return rule, header


# =============================================================================
# Tables
# =============================================================================
def write_clusters(path, clusters: ClusterSet):
    np.savetxt(path, clusters.centroids,
               header=f"max_norm {float(clusters.max_norm)!r}\ne11 e22 gamma12",
               fmt='%.17g')


def read_clusters(path):
    with open(path) as fh:
        max_norm = float(fh.readline().split()[-1])
    C = np.atleast_2d(np.loadtxt(path))
    return ClusterSet(C, max_norm)


def write_trajectories(path, trajectories):
    with open(path, 'w') as fh:
        fh.write("# e11 e22 gamma12 n_steps kind t_ramp t_end n_ramp\n")
        for t in trajectories:
            e = [float(x) for x in t.endpoint]
            fh.write(f"{e[0]!r} {e[1]!r} {e[2]!r} {t.n_steps} {t.kind} "
                     f"{float(t.t_ramp)!r} {float(t.t_end)!r} {t.n_ramp}\n")


def read_trajectories(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if line.startswith('#') or not line.strip():
                continue
            a = line.split()
            out.append(TrainingTrajectory(
                np.array([float(x) for x in a[:3]]), int(a[3]), a[4],
                float(a[5]), float(a[6]), int(a[7])))
    return out


def write_json(path, data):
    tmp = f"{path}.tmp"
    Path(tmp).write_text(json.dumps(data, indent=1, sort_keys=True,
                                    default=_json_default))
    os.replace(tmp, path)


def read_json(path):
    return json.loads(Path(path).read_text())


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")
