"""Quadratic triangle meshes, shape functions and quadrature for both scales.

Meshes are stored as plain arrays: node coordinates ``(n_nodes, 2)``, element
connectivity ``(n_elem, 6)`` (corners 0-2 counter-clockwise, then mid-edge
nodes 3: 0-1, 4: 1-2, 5: 2-0) and one material id per element.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import Delaunay

MATRIX = 0
INCLUSION = 1


class GeometryError(ValueError):
    """Raised for inclusions/pores that overlap or leave the unit cell."""


class MeshError(RuntimeError):
    """Raised when a mesh cannot be generated or is inconsistent."""


class InvertedElementError(MeshError):
    """Raised when an element has a non-positive Jacobian determinant."""


# =============================================================================
# Reference element and quadrature
# =============================================================================
@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray


#: 3-point degree-2 rule on the reference triangle (weights sum to 1/2).
TRI3_RULE = QuadratureRule(
    points=np.array([[1.0 / 6.0, 1.0 / 6.0],
                     [2.0 / 3.0, 1.0 / 6.0],
                     [1.0 / 6.0, 2.0 / 3.0]]),
    weights=np.full(3, 1.0 / 6.0),
)

REFERENCE_NODES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0],
                            [0.5, 0.0], [0.5, 0.5], [0.0, 0.5]])


def shape_functions(xi, eta):
    """Return quadratic triangle shape values and reference derivatives.

    Parameters
    ----------
    xi, eta : float or ndarray
        Reference coordinates (broadcast together).

    Returns
    -------
    N : ndarray, shape (..., 6)
    dN : ndarray, shape (..., 6, 2)
        Derivatives with respect to (xi, eta).
    """
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    l1 = 1.0 - xi - eta
    N = np.stack([l1 * (2 * l1 - 1), xi * (2 * xi - 1), eta * (2 * eta - 1),
                  4 * l1 * xi, 4 * xi * eta, 4 * eta * l1], axis=-1)
    dxi = np.stack([-(4 * l1 - 1), 4 * xi - 1, np.zeros_like(xi),
                    4 * (l1 - xi), 4 * eta, -4 * eta], axis=-1)
    deta = np.stack([-(4 * l1 - 1), np.zeros_like(xi), 4 * eta - 1,
                     -4 * xi, 4 * xi, 4 * (l1 - eta)], axis=-1)
    return N, np.stack([dxi, deta], axis=-1)


def _b_from_gradients(dNdx):
    """Plane-strain B matrices (eps11, eps22, gamma12) from physical gradients.

    ``dNdx`` has shape (..., 6, 2); result has shape (..., 3, 12) with nodal
    dofs ordered (u0x, u0y, u1x, ...).
    """
    shape = dNdx.shape[:-2]
    B = np.zeros(shape + (3, 12))
    B[..., 0, 0::2] = dNdx[..., 0]
    B[..., 1, 1::2] = dNdx[..., 1]
    B[..., 2, 0::2] = dNdx[..., 1]
    B[..., 2, 1::2] = dNdx[..., 0]
    return B


def shape_eval(coords, point):
    """Evaluate shape values, B matrix and Jacobian determinant.

    Parameters
    ----------
    coords : ndarray, shape (6, 2)
        Nodal coordinates of one element.
    point : sequence of float
        Reference coordinates (xi, eta) inside the reference triangle.

    Returns
    -------
    N : ndarray, shape (6,)
    B : ndarray, shape (3, 12)
    detJ : float
    """
    xi, eta = point
    if xi < -1e-12 or eta < -1e-12 or xi + eta > 1 + 1e-12:
        raise ValueError(f"point {point} outside reference triangle")
    N, dN = shape_functions(xi, eta)
    J = dN.T @ np.asarray(coords, dtype=float)
    detJ = float(np.linalg.det(J))
    if detJ <= 0.0:
        raise InvertedElementError(f"non-positive Jacobian determinant {detJ}")
    dNdx = np.linalg.solve(J, dN.T).T
    return N, _b_from_gradients(dNdx), detJ


# =============================================================================
# Mesh container
# =============================================================================
@dataclass
class Mesh:
    """Tri6 mesh with named boundary node sets.

    Attributes
    ----------
    nodes : ndarray, shape (n_nodes, 2)
    elements : ndarray of int, shape (n_elem, 6)
    material_ids : ndarray of int, shape (n_elem,)
    node_sets : dict of str to ndarray of int
    """
    nodes: np.ndarray
    elements: np.ndarray
    material_ids: np.ndarray
    node_sets: Dict[str, np.ndarray] = field(default_factory=dict)
    rule: QuadratureRule = TRI3_RULE

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=float)
        self.elements = np.ascontiguousarray(self.elements, dtype=np.int64)
        self.material_ids = np.ascontiguousarray(self.material_ids,
                                                 dtype=np.int64)
        self.node_sets = {k: np.asarray(v, dtype=np.int64)
                          for k, v in self.node_sets.items()}
        n = len(self.nodes)
        if self.elements.size and (self.elements.min() < 0
                                   or self.elements.max() >= n):
            raise MeshError("element references unknown node")
        for name, ids in self.node_sets.items():
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise MeshError(f"node set {name!r} references unknown node")
        if not np.all(np.isfinite(self.nodes)):
            raise MeshError("non-finite node coordinates")
        self._geom = None

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_elements(self):
        return len(self.elements)

    @property
    def n_dofs(self):
        return 2 * len(self.nodes)

    @property
    def n_points_per_element(self):
        return len(self.rule.weights)

    @property
    def n_integration_points(self):
        """Total (full) integration point count."""
        return self.n_elements * self.n_points_per_element

    def element_dofs(self):
        """Global dof indices per element, shape (n_elem, 12)."""
        e = self.elements
        return np.stack([2 * e, 2 * e + 1], axis=-1).reshape(len(e), 12)

    def geometry(self):
        """Cached integration-point data.

        Returns
        -------
        B : ndarray, shape (n_ip, 3, 12)
        weights : ndarray, shape (n_ip,)
            Physical quadrature weights ``w * detJ``.
        N : ndarray, shape (n_points_per_element, 6)
        x_ip : ndarray, shape (n_ip, 2)
        """
        if self._geom is None:
            pts = self.rule.points
            N, dN = shape_functions(pts[:, 0], pts[:, 1])
            X = self.nodes[self.elements]                    # (ne, 6, 2)
            J = np.einsum('qai,eaj->eqij', dN, X)            # (ne, nq, 2, 2)
            detJ = np.linalg.det(J)
            if np.any(detJ <= 0.0):
                bad = int(np.argmin(detJ.min(axis=1)))
                raise InvertedElementError(
                    f"element {bad} has non-positive Jacobian determinant")
            Jinv = np.linalg.inv(J)
            dNdx = np.einsum('qai,eqji->eqaj', dN, Jinv)
            B = _b_from_gradients(dNdx).reshape(-1, 3, 12)
            w = (detJ * self.rule.weights[None, :]).reshape(-1)
            x_ip = np.einsum('qa,eai->eqi', N, X).reshape(-1, 2)
            self._geom = (B, w, N, x_ip)
        return self._geom

    def element_areas(self):
        _, w, _, _ = self.geometry()
        return w.reshape(self.n_elements, -1).sum(axis=1)

    @property
    def volume(self):
        """Domain area |Omega| (sum of element areas)."""
        return float(self.element_areas().sum())

    def ip_material_ids(self):
        return np.repeat(self.material_ids, self.n_points_per_element)

    def ip_element_ids(self):
        return np.repeat(np.arange(self.n_elements),
                         self.n_points_per_element)


@dataclass
class DofMap:
    """Free/prescribed partition of the 2-per-node dofs.

    ``prescribed_values`` are the values at unit load factor.
    """
    n_dofs: int
    prescribed: np.ndarray
    prescribed_values: np.ndarray

    def __post_init__(self):
        self.prescribed = np.asarray(self.prescribed, dtype=np.int64)
        self.prescribed_values = np.asarray(self.prescribed_values,
                                            dtype=float)
        if len(np.unique(self.prescribed)) != len(self.prescribed):
            raise MeshError("duplicate prescribed dofs")
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.prescribed] = False
        self.free = np.flatnonzero(mask)

    def values(self, load_factor=1.0):
        return load_factor * self.prescribed_values


# =============================================================================
# Mesh generation
# =============================================================================
def _to_tri6(vertices, triangles, material_ids):
    """Add straight mid-edge nodes to a linear triangulation."""
    tri = np.asarray(triangles, dtype=np.int64).copy()
    v = np.asarray(vertices, dtype=float)
    # enforce counter-clockwise ordering
    d1 = v[tri[:, 1]] - v[tri[:, 0]]
    d2 = v[tri[:, 2]] - v[tri[:, 0]]
    cw = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] < 0
    tri[cw] = tri[cw][:, [0, 2, 1]]
    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    edges.sort(axis=1)
    uniq, inverse = np.unique(edges, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    mid = 0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]])
    nodes = np.concatenate([v, mid])
    ne = len(tri)
    mids = len(v) + inverse.reshape(3, ne).T
    return nodes, np.concatenate([tri, mids], axis=1), np.asarray(material_ids)


def _snap_midnodes_to_arcs(nodes, elements, circles, tol):
    """Move mid-edge nodes of chords between two points of a circle onto it.

    Gives curved (isoparametric) elements along the interfaces, so the phase
    areas converge at the quadratic-element rate instead of the chord rate.
    Modifies ``nodes`` in place.
    """
    for c in circles:
        on = np.abs(np.hypot(nodes[:, 0] - c.x, nodes[:, 1] - c.y) - c.r) < tol
        for a, b, m in ((0, 1, 3), (1, 2, 4), (2, 0, 5)):
            hit = on[elements[:, a]] & on[elements[:, b]]
            mid = np.unique(elements[hit, m])
            d = nodes[mid] - (c.x, c.y)
            nodes[mid] = (c.x, c.y) + c.r * d / np.linalg.norm(
                d, axis=1, keepdims=True)


def _compact(nodes, elements):
    used = np.unique(elements)
    remap = -np.ones(len(nodes), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return nodes[used], remap[elements]


def build_beam_mesh(L, H, nx, ny, material_id=0):
    """Structured Tri6 mesh of an ``L x H`` rectangle.

    Each of the ``nx * ny`` quads is split into two triangles. Node sets
    ``left`` (x = 0) and ``tip`` (x = L) contain all nodes on those edges,
    mid-edge nodes included.
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be >= 1")
    if L <= 0 or H <= 0:
        raise ValueError("L and H must be positive")
    # Tri6 nodes live on the (2nx+1) x (2ny+1) lattice
    X, Y = np.meshgrid(np.linspace(0, L, 2 * nx + 1),
                       np.linspace(0, H, 2 * ny + 1), indexing='ij')
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)

    def nid(i, j):
        return i * (2 * ny + 1) + j

    elems = []
    for i in range(nx):
        for j in range(ny):
            a, b = 2 * i, 2 * j
            n00, n20, n02, n22 = nid(a, b), nid(a + 2, b), nid(a, b + 2), \
                nid(a + 2, b + 2)
            n10, n21, n12, n01 = nid(a + 1, b), nid(a + 2, b + 1), \
                nid(a + 1, b + 2), nid(a, b + 1)
            n11 = nid(a + 1, b + 1)
            elems.append([n00, n20, n22, n10, n21, n11])
            elems.append([n00, n22, n02, n11, n12, n01])
    left = [nid(0, j) for j in range(2 * ny + 1)]
    tip = [nid(2 * nx, j) for j in range(2 * ny + 1)]
    return Mesh(nodes, np.array(elems), np.full(len(elems), material_id),
                {'left': left, 'tip': tip})


@dataclass(frozen=True)
class Circle:
    x: float
    y: float
    r: float


@dataclass(frozen=True)
class RveGeometry:
    """Unit-cell layout: circular stiff inclusions and circular pores.

    ``element_size`` is the target edge length of the background grid.
    """
    inclusions: Tuple[Circle, ...] = (Circle(0.3, 0.3, 0.2),
                                      Circle(0.7, 0.65, 0.2))
    pores: Tuple[Circle, ...] = (Circle(0.7, 0.22, 0.15),)
    element_size: float = 1.0 / 12.0

    def with_size(self, element_size):
        return RveGeometry(self.inclusions, self.pores, element_size)

    def validate(self, clearance=0.0):
        circles = list(self.inclusions) + list(self.pores)
        for c in circles:
            if c.r <= 0:
                raise GeometryError(f"non-positive radius in {c}")
            if (c.x - c.r <= clearance or c.x + c.r >= 1 - clearance
                    or c.y - c.r <= clearance or c.y + c.r >= 1 - clearance):
                raise GeometryError(f"{c} leaves the unit cell")
        for i, a in enumerate(circles):
            for b in circles[i + 1:]:
                if np.hypot(a.x - b.x, a.y - b.y) <= a.r + b.r + clearance:
                    raise GeometryError(f"{a} overlaps {b}")


REFINEMENT_SIZES = {'coarse': 1.0 / 8.0, 'medium': 1.0 / 12.0,
                    'fine': 1.0 / 16.0, 'finest': 1.0 / 24.0}


def build_rve_mesh(geometry: Optional[RveGeometry] = None, level=None):
    """Conforming Tri6 mesh of the unit cell.

    A regular background grid is thinned near every circle, points are placed
    on the circles and the set is Delaunay-triangulated. Triangles whose
    centroid falls inside a pore are dropped; those inside an inclusion get
    material id ``INCLUSION``.

    Parameters
    ----------
    geometry : RveGeometry, optional
        Layout; default places two inclusions and one pore.
    level : {'coarse', 'medium', 'fine', 'finest'}, optional
        Overrides ``geometry.element_size``.
    """
    geometry = geometry or RveGeometry()
    if level is not None:
        geometry = geometry.with_size(REFINEMENT_SIZES[level])
    h = geometry.element_size
    if not 0 < h <= 0.5:
        raise GeometryError("element size must be in (0, 0.5]")
    geometry.validate()
    circles = list(geometry.inclusions) + list(geometry.pores)

    n = int(round(1.0 / h))
    g = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(g, g, indexing='ij')
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    keep = np.ones(len(pts), dtype=bool)
    on_cell_boundary = ((pts == 0.0) | (pts == 1.0)).any(axis=1)
    for c in circles:
        d = np.hypot(pts[:, 0] - c.x, pts[:, 1] - c.y)
        keep &= np.abs(d - c.r) > 0.55 * h
    for c in geometry.pores:
        d = np.hypot(pts[:, 0] - c.x, pts[:, 1] - c.y)
        keep &= d > c.r
    if np.any(on_cell_boundary & ~keep):
        raise GeometryError("circle too close to the cell boundary for "
                            "this element size")
    parts = [pts[keep]]
    for c in circles:
        nc = max(8, int(np.ceil(2 * np.pi * c.r / (0.8 * h))))
        t = 2 * np.pi * np.arange(nc) / nc
        parts.append(np.stack([c.x + c.r * np.cos(t),
                               c.y + c.r * np.sin(t)], axis=1))
    verts = np.concatenate(parts)
    tri = Delaunay(verts).simplices
    cent = verts[tri].mean(axis=1)
    mat = np.full(len(tri), MATRIX)
    alive = np.ones(len(tri), dtype=bool)
    for c in geometry.inclusions:
        mat[np.hypot(cent[:, 0] - c.x, cent[:, 1] - c.y) < c.r] = INCLUSION
    for c in geometry.pores:
        alive &= np.hypot(cent[:, 0] - c.x, cent[:, 1] - c.y) >= c.r
    d1 = verts[tri[:, 1]] - verts[tri[:, 0]]
    d2 = verts[tri[:, 2]] - verts[tri[:, 0]]
    area = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    if np.any(area[alive] < 1e-10 * h * h):
        raise MeshError("degenerate triangle in RVE mesh")
    tri, mat = tri[alive], mat[alive]
    verts, tri = _compact(verts, tri)
    nodes, elements, mat = _to_tri6(verts, tri, mat)
    _snap_midnodes_to_arcs(nodes, elements, circles, tol=1e-9)
    tol = 1e-12
    sets = {
        'left': np.flatnonzero(np.abs(nodes[:, 0]) < tol),
        'right': np.flatnonzero(np.abs(nodes[:, 0] - 1) < tol),
        'bottom': np.flatnonzero(np.abs(nodes[:, 1]) < tol),
        'top': np.flatnonzero(np.abs(nodes[:, 1] - 1) < tol),
    }
    sets['boundary'] = np.unique(np.concatenate(list(sets.values())))
    mesh = Mesh(nodes, elements, mat, sets)
    mesh.geometry()
    return mesh


def homogeneous_rve_mesh(n=4):
    """Single-material structured unit-cell mesh (no inclusions, no pore)."""
    mesh = build_beam_mesh(1.0, 1.0, n, n)
    nodes = mesh.nodes
    tol = 1e-12
    sets = {
        'left': np.flatnonzero(np.abs(nodes[:, 0]) < tol),
        'right': np.flatnonzero(np.abs(nodes[:, 0] - 1) < tol),
        'bottom': np.flatnonzero(np.abs(nodes[:, 1]) < tol),
        'top': np.flatnonzero(np.abs(nodes[:, 1] - 1) < tol),
    }
    sets['boundary'] = np.unique(np.concatenate(list(sets.values())))
    return Mesh(nodes, mesh.elements, mesh.material_ids, sets)


# =============================================================================
# Plain-text serialization
# =============================================================================
def write_mesh(mesh: Mesh, path):
    """Write the native text format (floats as ``repr`` for exact round-trip)."""
    lines = [f"tri6mesh {mesh.n_nodes} {mesh.n_elements} {len(mesh.node_sets)}"]
    lines += [f"{i} {x!r} {y!r}" for i, (x, y) in
              enumerate(mesh.nodes.tolist())]
    for i, (mat, conn) in enumerate(zip(mesh.material_ids.tolist(),
                                        mesh.elements.tolist())):
        lines.append(f"{i} {mat} " + " ".join(map(str, conn)))
    for name, ids in mesh.node_sets.items():
        lines.append(f"set {name} {len(ids)} " + " ".join(map(str, ids.tolist())))
    with open(path, 'w') as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    with open(path) as fh:
        lines = fh.read().splitlines()
    head = lines[0].split()
    if head[0] != 'tri6mesh':
        raise MeshError(f"{path}: not a tri6mesh file")
    nn, ne, ns = map(int, head[1:])
    nodes = np.empty((nn, 2))
    for k, line in enumerate(lines[1:1 + nn]):
        i, x, y = line.split()
        if int(i) != k:
            raise MeshError("node ids must be dense and ordered")
        nodes[k] = float(x), float(y)
    elements = np.empty((ne, 6), dtype=np.int64)
    mats = np.empty(ne, dtype=np.int64)
    for k, line in enumerate(lines[1 + nn:1 + nn + ne]):
        tok = list(map(int, line.split()))
        mats[k] = tok[1]
        elements[k] = tok[2:8]
    sets = {}
    for line in lines[1 + nn + ne:1 + nn + ne + ns]:
        tok = line.split()
        sets[tok[1]] = np.array(tok[3:3 + int(tok[2])], dtype=np.int64)
    return Mesh(nodes, elements, mats, sets)


def fixed_dofs(mesh: Mesh, node_set: str, components: Sequence[int] = (0, 1)):
    ids = mesh.node_sets[node_set]
    return np.sort(np.concatenate([2 * ids + c for c in components]))
