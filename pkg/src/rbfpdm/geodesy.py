"""Geodesic queries on the vertex-edge graph of a triangle mesh.

The graph holds the mesh edges plus, for every pair of faces sharing an edge,
a diagonal between the two opposite vertices weighted by its length in the
unfolded face pair (added only when that straight line stays inside the pair).
The diagonals cut the metric overestimate of a pure edge graph roughly in half.

Surface points attach to the graph through their three nearest mesh vertices;
the distance between two points is the smallest hop + graph distance + hop
over those attachments (or the plain Euclidean distance when both share the
same nearest vertex). Points sitting on a vertex get exact graph distances.
"""

from __future__ import annotations

import logging
import threading
from collections import OrderedDict

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

from .errors import GeodesyError
from .mesh import TriangleMesh

logger = logging.getLogger(__name__)


class GeodesicIndex:
    """Edge graph, vertex lookup and surface projection for one mesh."""

    def __init__(self, mesh: TriangleMesh):
        self.mesh = mesh
        e = mesh.edges
        w = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
        de, dw = unfolded_diagonals(mesh)
        e = np.vstack([e, de])
        w = np.r_[w, dw]
        n = mesh.n_vertices
        g = coo_matrix((np.r_[w, w], (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n))
        self.graph = g.tocsr()
        n_comp, labels = connected_components(self.graph, directed=False)
        if n_comp > 1:
            sizes = np.bincount(labels).tolist()
            raise GeodesyError(f"mesh is disconnected: {n_comp} components of sizes {sizes}")
        self._tree = cKDTree(mesh.vertices)
        self.clamped_walks = 0
        self._rows: OrderedDict[int, np.ndarray] = OrderedDict()
        self._preds: OrderedDict[int, np.ndarray] = OrderedDict()
        self._max_rows = max(64, int(64e6 // (8 * n)))
        self._lock = threading.Lock()

    def nearest_vertex(self, points):
        d, idx = self._tree.query(np.atleast_2d(points))
        return idx, d

    def vertex_distances(self, vertices) -> np.ndarray:
        """Graph distances from each listed vertex to every vertex, shape (len, V).

        Rows are cached per source vertex (least recently used eviction).
        """
        vertices = [int(v) for v in np.atleast_1d(vertices)]
        with self._lock:
            missing = sorted({v for v in vertices if v not in self._rows})
            if missing:
                rows = dijkstra(self.graph, directed=False, indices=missing)
                for v, row in zip(missing, rows):
                    self._rows[v] = row
            out = np.empty((len(vertices), self.mesh.n_vertices))
            for k, v in enumerate(vertices):
                out[k] = self._rows[v]
                self._rows.move_to_end(v)
            while len(self._rows) > max(self._max_rows, len(vertices)):
                self._rows.popitem(last=False)
        return out

    def predecessors(self, vertex: int) -> np.ndarray:
        """Shortest-path tree rooted at `vertex` (cached)."""
        vertex = int(vertex)
        with self._lock:
            pred = self._preds.get(vertex)
            if pred is None:
                _, pred = dijkstra(self.graph, directed=False, indices=vertex, return_predecessors=True)
                self._preds[vertex] = pred
                while len(self._preds) > 256:
                    self._preds.popitem(last=False)
            else:
                self._preds.move_to_end(vertex)
        return pred

    def project(self, points) -> np.ndarray:
        return self.mesh.proximity.project(points)


def unfolded_diagonals(mesh: TriangleMesh):
    """Opposite-vertex pairs across each interior edge with their unfolded lengths."""
    f = mesh.faces
    v = mesh.vertices
    directed = f[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    opposite = f[:, [2, 0, 1]].reshape(-1)
    key = np.sort(directed, axis=1)
    order = np.lexsort((key[:, 1], key[:, 0]))
    key, directed, opposite = key[order], directed[order], opposite[order]
    # closed manifold: every undirected edge appears exactly twice, adjacent after sorting
    a, b = key[0::2, 0], key[0::2, 1]
    c, d = opposite[0::2], opposite[1::2]
    ab = v[b] - v[a]
    lab = np.linalg.norm(ab, axis=1)
    u = ab / lab[:, None]

    def planar(p):
        ap = v[p] - v[a]
        x = np.einsum("ij,ij->i", ap, u)
        y = np.linalg.norm(ap - x[:, None] * u, axis=1)
        return x, y

    cx, cy = planar(c)
    dx, dy = planar(d)
    length = np.hypot(cx - dx, cy + dy)
    with np.errstate(divide="ignore", invalid="ignore"):
        cross = cx + (dx - cx) * cy / (cy + dy)
    keep = (cross > 0) & (cross < lab) & (c != d)
    return np.stack([c[keep], d[keep]], axis=1), length[keep]


ATTACH = 3


def _attach(index: GeodesicIndex, pts):
    k = min(ATTACH, index.mesh.n_vertices)
    hop, v = index._tree.query(pts, k=k)
    return v.reshape(len(pts), k), hop.reshape(len(pts), k)


def surface_distance_matrix(index: GeodesicIndex, a, b) -> np.ndarray:
    """Approximate geodesic distances between two point sets, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    va, ha = _attach(index, a)
    vb, hb = _attach(index, b)
    uniq, inv = np.unique(va, return_inverse=True)
    inv = inv.reshape(va.shape)
    rows = index.vertex_distances(uniq)[:, vb]            # (U, nb, k)
    g = rows[inv] + ha[:, :, None, None] + hb[None, None, :, :]   # (na, k, nb, k)
    g = g.min(axis=(1, 3))
    same = va[:, 0][:, None] == vb[:, 0][None, :]
    eu = np.linalg.norm(a[:, None] - b[None, :], axis=2)
    g[same] = eu[same]
    return g


def geodesic_distances(index: GeodesicIndex, source) -> np.ndarray:
    """Distance from a surface point to every mesh vertex."""
    v, hop = _attach(index, np.asarray(source, dtype=np.float64).reshape(1, 3))
    return (index.vertex_distances(v[0]) + hop[0][:, None]).min(axis=0)


def pairwise_geodesics(index: GeodesicIndex, points) -> np.ndarray:
    """Symmetric matrix of point-to-point geodesic distances."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    g = surface_distance_matrix(index, pts, pts)
    g = np.minimum(g, g.T)
    np.fill_diagonal(g, 0.0)
    return g


def farthest_point_sample(index: GeodesicIndex, count: int, seed_vertex: int | None = None):
    """Greedy geodesic farthest-point sampling.

    Returns (points, vertex indices) in selection order. The default seed is
    the vertex nearest the mesh centroid (lowest index on ties).
    """
    mesh = index.mesh
    if count < 1:
        raise GeodesyError("count must be >= 1")
    if count > mesh.n_vertices:
        raise GeodesyError(f"cannot sample {count} points from {mesh.n_vertices} vertices")
    if seed_vertex is None:
        seed_vertex = int(np.argmin(np.linalg.norm(mesh.vertices - mesh.centroid, axis=1)))
    chosen = [int(seed_vertex)]
    mind = index.vertex_distances(seed_vertex)[0]
    for _ in range(count - 1):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, index.vertex_distances(nxt)[0])
    chosen = np.array(chosen)
    return mesh.vertices[chosen].copy(), chosen


def nearest_neighbor_distance(geo: np.ndarray) -> np.ndarray:
    g = geo.copy()
    np.fill_diagonal(g, np.inf)
    return g.min(axis=1)


def neighbors_from_matrix(geo: np.ndarray, factor: float = 1.5) -> list[frozenset]:
    if factor < 1:
        raise GeodesyError("factor must be >= 1")
    g = geo.copy()
    np.fill_diagonal(g, np.inf)
    dstar = g.min(axis=1)
    if np.any(dstar <= 0):
        j = int(np.argmin(dstar))
        k = int(np.argmin(g[j]))
        raise GeodesyError(f"duplicate particles {j} and {k} (zero geodesic separation)")
    return [frozenset(np.flatnonzero(g[j] <= factor * dstar[j]).tolist()) for j in range(len(g))]


def geodesic_neighbors(index: GeodesicIndex, particles, factor: float = 1.5) -> list[frozenset]:
    """Per particle: indices within `factor` x its closest geodesic neighbor distance.

    The relation is not symmetric.
    """
    return neighbors_from_matrix(pairwise_geodesics(index, particles), factor)


def geodesic_path(index: GeodesicIndex, start, end):
    """Shortest path start -> vertex chain -> end.

    Both ends attach through their nearest vertices like the distance queries,
    so a point between vertices does not first backtrack to a vertex behind
    it. Returns (polyline points, segment lengths); interior segments carry
    their graph weights so the total equals the geodesic distance.
    """
    start = np.asarray(start, dtype=np.float64).reshape(3)
    end = np.asarray(end, dtype=np.float64).reshape(3)
    v, hop = _attach(index, np.stack([start, end]))
    if v[0, 0] == v[1, 0]:
        return np.stack([start, end]), np.array([np.linalg.norm(end - start)])
    total = index.vertex_distances(v[0])[:, v[1]] + hop[0][:, None] + hop[1][None, :]
    i, k = np.unravel_index(int(np.argmin(total)), total.shape)
    va, vb = int(v[0, i]), int(v[1, k])
    pred = index.predecessors(va)
    chain = [vb]
    while chain[-1] != va:
        chain.append(int(pred[chain[-1]]))
    chain.reverse()
    verts = index.mesh.vertices[chain]
    inner = np.asarray(index.graph[chain[:-1], chain[1:]]).ravel() if len(chain) > 1 else np.empty(0)
    seg = np.r_[np.linalg.norm(verts[0] - start), inner, np.linalg.norm(end - verts[-1])]
    return np.vstack([start, verts, end]), seg


def walk_along(path: np.ndarray, seg: np.ndarray, distance: float):
    """Point at arc length `distance` on a polyline; returns (point, clamped)."""
    cum = np.r_[0.0, np.cumsum(seg)]
    if distance <= 0:
        return path[0].copy(), False
    if distance >= cum[-1]:
        return path[-1].copy(), distance > cum[-1] * (1 + 1e-12)
    k = int(np.searchsorted(cum, distance, side="right")) - 1
    k = min(k, len(seg) - 1)
    t = (distance - cum[k]) / seg[k] if seg[k] > 0 else 0.0
    return path[k] + t * (path[k + 1] - path[k]), False


def geodesic_walk(index: GeodesicIndex, start, toward, distance: float) -> np.ndarray:
    """Point at arc length `distance` along the geodesic path, projected onto the mesh.

    Distances past the end of the path clamp to `toward` and increment
    `index.clamped_walks`.
    """
    if distance < 0:
        raise GeodesyError("walk distance must be non-negative")
    if distance == 0:
        return np.asarray(start, dtype=np.float64).reshape(3).copy()
    path, seg = geodesic_path(index, start, toward)
    pt, clamped = walk_along(path, seg, distance)
    if clamped:
        index.clamped_walks += 1
        logger.debug("walk of %.4g exceeds path length %.4g; clamped", distance, seg.sum())
    return index.project(pt[None])[0]


def geodesic_step_away(index: GeodesicIndex, point, away_from, distance: float) -> np.ndarray:
    """Continue the geodesic from `away_from` through `point` by `distance`, then project.

    The step follows the final segment of the path polyline, so it is meant for
    distances up to about one particle spacing.
    """
    point = np.asarray(point, dtype=np.float64).reshape(3)
    if distance <= 0:
        return point.copy()
    path, _ = geodesic_path(index, away_from, point)
    d = point - path[-2]
    if np.linalg.norm(d) < 1e-12:
        d = point - np.asarray(away_from, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(d)
    if norm < 1e-12:
        return point.copy()
    return index.project((point + distance * d / norm)[None])[0]
