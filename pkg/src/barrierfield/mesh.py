"""Triangle meshes: generation, barrier marking, restriction, point location, JSON I/O.

A mesh carries one subdomain label per triangle. Label 1 is the normal
area (water) and label 2 the physical barrier (land); more labels are
allowed and simply give more subdomains.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

__all__ = [
    "MeshError",
    "TriangleMesh",
    "BarrierGeometry",
    "Projector",
    "build_regular_mesh",
    "regular_mesh",
    "mark_barrier",
    "restrict_to_subdomain",
    "project_points",
    "save_mesh",
    "load_mesh",
    "points_in_polygon",
]


class MeshError(ValueError):
    """Invalid mesh data."""


def _signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1]))


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Conforming triangulation with per-triangle subdomain labels.

    Attributes
    ----------
    vertices : (N, 2) float array
    triangles : (M, 3) int array, counter-clockwise vertex triples
    subdomain : (M,) int array of labels >= 1
    """

    vertices: np.ndarray
    triangles: np.ndarray
    subdomain: np.ndarray = None

    def __post_init__(self):
        V = np.array(self.vertices, dtype=float, copy=True).reshape(-1, 2)
        T = np.array(self.triangles, dtype=np.int64, copy=True).reshape(-1, 3)
        S = np.ones(len(T), np.int64) if self.subdomain is None else np.array(self.subdomain, np.int64, copy=True).ravel()
        if not np.all(np.isfinite(V)):
            raise MeshError("vertex coordinates must be finite")
        if T.size and (T.min() < 0 or T.max() >= len(V)):
            raise MeshError(f"triangle index out of range for {len(V)} vertices")
        if S.shape != (len(T),):
            raise MeshError(f"{len(S)} subdomain labels for {len(T)} triangles")
        if S.size and S.min() < 1:
            raise MeshError("subdomain labels must be >= 1")
        areas = _signed_areas(V, T)
        if np.any(areas <= 0):
            bad = int(np.flatnonzero(areas <= 0)[0])
            raise MeshError(f"triangle {bad} has non-positive signed area {areas[bad]:g}")
        edges = np.sort(T[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        if counts.size and counts.max() > 2:
            raise MeshError("mesh is not edge-conforming: an edge is shared by more than 2 triangles")
        for name, arr in (("vertices", V), ("triangles", T), ("subdomain", S)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def areas(self) -> np.ndarray:
        return _signed_areas(self.vertices, self.triangles)

    @property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])

    def with_subdomain(self, subdomain) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles, subdomain)

    def edge_lengths(self) -> np.ndarray:
        V, T = self.vertices, self.triangles
        return np.linalg.norm(V[T[:, [1, 2, 0]]] - V[T], axis=2).ravel()

    def node_adjacency(self) -> sp.csr_matrix:
        """Boolean node graph; two nodes are adjacent if they share a triangle."""
        T = self.triangles
        r = np.repeat(T, 3, axis=1).ravel()
        c = np.tile(T, (1, 3)).ravel()
        A = sp.csr_matrix((np.ones(r.size, bool), (r, c)), shape=(self.n_vertices,) * 2)
        A.sum_duplicates()
        return A

    def nearest_node(self, point) -> int:
        d = np.linalg.norm(self.vertices - np.asarray(point, float), axis=1)
        return int(np.argmin(d))

    def __eq__(self, other):
        if not isinstance(other, TriangleMesh):
            return NotImplemented
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
            and np.array_equal(self.subdomain, other.subdomain)
        )

    def __repr__(self):
        labels = np.unique(self.subdomain).tolist()
        return f"TriangleMesh(n_vertices={self.n_vertices}, n_triangles={self.n_triangles}, labels={labels})"


def build_regular_mesh(bbox, nx: int, ny: int, extension: float = 0.0) -> TriangleMesh:
    """Union-jack triangulation of a rectangle grown by ``extension`` on every side.

    The extended rectangle is split into ``nx`` by ``ny`` equal cells and every
    cell into two right triangles, with the diagonal direction alternating
    like a chequerboard. That gives ``(nx+1)(ny+1)`` vertices and ``2 nx ny``
    triangles. The stiffness stencil is the same at every interior node;
    nodes with even ``i + j`` touch eight triangles, the others four.

    Parameters
    ----------
    bbox : (xmin, xmax, ymin, ymax)
    nx, ny : int
        Cells along x and y of the extended rectangle, at least 2.
    extension : float
        Outer margin added on all four sides.
    """
    xmin, xmax, ymin, ymax = map(float, bbox)
    if not (xmax > xmin and ymax > ymin):
        raise MeshError(f"degenerate bounding box {bbox}")
    if nx < 2 or ny < 2:
        raise MeshError("nx and ny must be at least 2")
    if extension < 0:
        raise MeshError("extension must be non-negative")
    xs = np.linspace(xmin - extension, xmax + extension, nx + 1)
    ys = np.linspace(ymin - extension, ymax + extension, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i * (ny + 1) + j

    I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    I, J = I.ravel(), J.ravel()
    v00, v10, v01, v11 = vid(I, J), vid(I + 1, J), vid(I, J + 1), vid(I + 1, J + 1)
    even = (I + J) % 2 == 0
    t1 = np.where(even[:, None], np.column_stack([v00, v10, v11]), np.column_stack([v00, v10, v01]))
    t2 = np.where(even[:, None], np.column_stack([v00, v11, v01]), np.column_stack([v10, v11, v01]))
    triangles = np.stack([t1, t2], axis=1).reshape(-1, 3)
    return TriangleMesh(vertices, triangles)


def regular_mesh(bbox, spacing: float, extension: float = 0.0) -> TriangleMesh:
    """:func:`build_regular_mesh` with the cell count chosen from a target spacing."""
    xmin, xmax, ymin, ymax = map(float, bbox)
    nx = max(2, int(round((xmax - xmin + 2 * extension) / spacing)))
    ny = max(2, int(round((ymax - ymin + 2 * extension) / spacing)))
    return build_regular_mesh(bbox, nx, ny, extension)


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4):
        return True
    return False


def _is_simple(poly: np.ndarray) -> bool:
    k = len(poly)
    for a in range(k):
        p1, p2 = poly[a], poly[(a + 1) % k]
        for b in range(a + 2, k):
            if a == 0 and b == k - 1:
                continue
            if _segments_cross(p1, p2, poly[b], poly[(b + 1) % k]):
                return False
    return True


@dataclass(frozen=True)
class BarrierGeometry:
    """Closed simple polygons outlining the physical barrier.

    Polygons are stored without a repeated closing vertex and oriented
    counter-clockwise.
    """

    polygons: tuple = field(default_factory=tuple)

    def __post_init__(self):
        cleaned = []
        for poly in self.polygons:
            P = np.asarray(poly, dtype=float).reshape(-1, 2)
            if len(P) > 1 and np.allclose(P[0], P[-1]):
                P = P[:-1]
            if len(P) < 3:
                raise MeshError("a barrier polygon needs at least 3 vertices")
            if not np.all(np.isfinite(P)):
                raise MeshError("barrier polygon coordinates must be finite")
            if not _is_simple(P):
                raise MeshError("barrier polygon is self-intersecting")
            x, y = P[:, 0], P[:, 1]
            if np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) < 0:
                P = P[::-1]
            P.setflags(write=False)
            cleaned.append(P)
        object.__setattr__(self, "polygons", tuple(cleaned))

    @classmethod
    def rectangles(cls, *rects) -> "BarrierGeometry":
        """Barrier made of axis-aligned rectangles ``(xmin, xmax, ymin, ymax)``."""
        return cls(tuple(np.array([[a, c], [b, c], [b, d], [a, d]], float) for a, b, c, d in rects))

    def contains(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        inside = np.zeros(len(points), bool)
        for P in self.polygons:
            inside |= points_in_polygon(points, P)
        return inside


def points_in_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Even-odd ray casting; points exactly on an edge may go either way."""
    x, y = points[:, 0][:, None], points[:, 1][:, None]
    x1, y1 = polygon[:, 0][None, :], polygon[:, 1][None, :]
    x2, y2 = np.roll(polygon[:, 0], -1)[None, :], np.roll(polygon[:, 1], -1)[None, :]
    straddle = (y1 > y) != (y2 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    return np.count_nonzero(straddle & (x < xcross), axis=1) % 2 == 1


def mark_barrier(mesh: TriangleMesh, barrier: BarrierGeometry) -> TriangleMesh:
    """Label triangles whose centroid lies inside the barrier with 2, the rest with 1."""
    labels = np.where(barrier.contains(mesh.centroids), 2, 1)
    return mesh.with_subdomain(labels)


def restrict_to_subdomain(mesh: TriangleMesh, q: int) -> tuple[TriangleMesh, np.ndarray]:
    """Keep only the triangles labelled ``q``.

    Returns
    -------
    sub : TriangleMesh
        Compactly re-indexed mesh (vertex order follows the parent).
    parent_nodes : ndarray
        ``parent_nodes[i]`` is the parent index of vertex ``i`` of ``sub``.
    """
    keep = mesh.subdomain == q
    if not keep.any():
        raise MeshError(f"subdomain {q} is empty")
    T = mesh.triangles[keep]
    parent_nodes = np.unique(T)
    remap = np.full(mesh.n_vertices, -1, np.int64)
    remap[parent_nodes] = np.arange(parent_nodes.size)
    sub = TriangleMesh(mesh.vertices[parent_nodes], remap[T], mesh.subdomain[keep])
    return sub, parent_nodes


@dataclass(frozen=True, eq=False)
class Projector:
    """Barycentric evaluation of the piecewise-linear basis at given points.

    ``matrix`` is the sparse (points x nodes) interpolation matrix; rows for
    points outside the mesh are empty and flagged in ``valid``.
    """

    matrix: sp.csr_matrix
    valid: np.ndarray
    triangle: np.ndarray
    weights: np.ndarray
    nodes: np.ndarray

    @property
    def n_points(self) -> int:
        return self.matrix.shape[0]

    def subset(self, rows) -> "Projector":
        rows = np.asarray(rows)
        return Projector(self.matrix[rows], self.valid[rows], self.triangle[rows], self.weights[rows], self.nodes[rows])

    def remap_nodes(self, node_map: np.ndarray, n_nodes: int) -> "Projector":
        """Projector onto a mesh whose node ``node_map[i]`` equals our node ``i``."""
        nodes = node_map[self.nodes]
        return _projector_from(nodes, self.weights, self.valid, self.triangle, n_nodes)


def _projector_from(nodes, weights, valid, tri, n_nodes) -> Projector:
    m = len(valid)
    keep = (weights != 0.0) & valid[:, None]
    rows = np.repeat(np.arange(m), 3).reshape(m, 3)[keep]
    mat = sp.csr_matrix((weights[keep], (rows, nodes[keep])), shape=(m, n_nodes))
    mat.sum_duplicates()
    return Projector(mat, valid, tri, weights, nodes)


def project_points(mesh: TriangleMesh, points, tol: float = 1e-12) -> Projector:
    """Locate points in the mesh and compute their barycentric weights.

    A point lying on a shared edge or vertex belongs to the lowest-indexed
    triangle that contains it. Weights below ``tol`` in magnitude are dropped
    and the rest renormalized to sum to one.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    m = len(pts)
    V, T = mesh.vertices, mesh.triangles
    tri_out = np.full(m, -1, np.int64)
    weights = np.zeros((m, 3))
    nodes = np.zeros((m, 3), np.int64)
    if m == 0:
        return _projector_from(nodes, weights, np.zeros(0, bool), tri_out, mesh.n_vertices)

    cent = mesh.centroids
    reach = float(np.max(np.linalg.norm(V[T] - cent[:, None, :], axis=2))) * (1 + 1e-9)
    cand = cKDTree(cent).query_ball_point(pts, r=reach)
    lens = np.fromiter((len(c) for c in cand), np.int64, count=m)
    if lens.sum():
        pid = np.repeat(np.arange(m), lens)
        tid = np.concatenate([np.asarray(c, np.int64) for c in cand if len(c)])
        a, b, c = V[T[tid, 0]], V[T[tid, 1]], V[T[tid, 2]]
        p = pts[pid]
        det = (b[:, 1] - c[:, 1]) * (a[:, 0] - c[:, 0]) + (c[:, 0] - b[:, 0]) * (a[:, 1] - c[:, 1])
        l1 = ((b[:, 1] - c[:, 1]) * (p[:, 0] - c[:, 0]) + (c[:, 0] - b[:, 0]) * (p[:, 1] - c[:, 1])) / det
        l2 = ((c[:, 1] - a[:, 1]) * (p[:, 0] - c[:, 0]) + (a[:, 0] - c[:, 0]) * (p[:, 1] - c[:, 1])) / det
        l3 = 1.0 - l1 - l2
        lam = np.column_stack([l1, l2, l3])
        inside = np.all(lam >= -tol, axis=1)
        pid, tid, lam = pid[inside], tid[inside], lam[inside]
        # lowest triangle index wins for points on shared edges
        order = np.lexsort((tid, pid))
        pid, tid, lam = pid[order], tid[order], lam[order]
        first = np.ones(pid.size, bool)
        first[1:] = pid[1:] != pid[:-1]
        pid, tid, lam = pid[first], tid[first], lam[first]
        lam = np.where(np.abs(lam) < tol, 0.0, lam)
        lam = np.clip(lam, 0.0, None)
        lam /= lam.sum(axis=1, keepdims=True)
        tri_out[pid] = tid
        weights[pid] = lam
        nodes[pid] = T[tid]
    valid = tri_out >= 0
    return _projector_from(nodes, weights, valid, tri_out, mesh.n_vertices)


def save_mesh(mesh: TriangleMesh, path) -> None:
    """Write ``{"vertices", "triangles", "subdomain"}`` JSON with zero-based indices."""
    doc = {
        "vertices": mesh.vertices.tolist(),
        "triangles": mesh.triangles.tolist(),
        "subdomain": mesh.subdomain.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_mesh(path) -> TriangleMesh:
    """Read a mesh written by :func:`save_mesh`; raises :class:`MeshError` on bad content."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MeshError(f"malformed mesh JSON: {exc}") from exc
    if not isinstance(doc, dict) or "vertices" not in doc or "triangles" not in doc:
        raise MeshError("mesh JSON needs 'vertices' and 'triangles'")
    try:
        V = np.array(doc["vertices"], dtype=float)
        T = np.array(doc["triangles"], dtype=np.int64)
        S = doc.get("subdomain")
    except (TypeError, ValueError) as exc:
        raise MeshError(f"malformed mesh arrays: {exc}") from exc
    if V.ndim != 2 or V.shape[1] != 2 or T.ndim != 2 or T.shape[1] != 3:
        raise MeshError("vertices must be [[x, y], ...] and triangles [[i, j, k], ...]")
    return TriangleMesh(V, T, S)
