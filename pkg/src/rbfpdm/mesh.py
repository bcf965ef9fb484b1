"""Triangle meshes: validation, OBJ/PLY I/O and exact point-to-mesh queries."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import MeshError

logger = logging.getLogger(__name__)

# region codes returned by closest_point_on_triangles
FACE, VERT_A, VERT_B, VERT_C, EDGE_AB, EDGE_BC, EDGE_CA = range(7)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Closed, consistently oriented triangle mesh.

    Construct through `TriangleMesh.from_arrays`, which validates topology and
    computes unit vertex normals.
    """

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray = field(repr=False)

    @classmethod
    def from_arrays(cls, vertices, faces, normals=None, validate=True) -> "TriangleMesh":
        v = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
        if validate:
            f = validate_topology(v, f)
        if normals is None:
            n = vertex_normals(v, f)
        else:
            n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
            if n.shape != v.shape:
                raise MeshError(f"normals shape {n.shape} does not match vertices {v.shape}")
            n = n / np.linalg.norm(n, axis=1, keepdims=True)
        for a in (v, f, n):
            a.setflags(write=False)
        return cls(v, f, n)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def face_normals(self) -> np.ndarray:
        cr = _face_cross(self.vertices, self.faces)
        return cr / np.linalg.norm(cr, axis=1, keepdims=True)

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(_face_cross(self.vertices, self.faces), axis=1)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted vertex pairs."""
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def bbox_diagonal(self) -> float:
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    @property
    def volume(self) -> float:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    @cached_property
    def proximity(self) -> "MeshProximity":
        return MeshProximity(self)

    def transformed(self, rotation=None, translation=None, scale=1.0) -> "TriangleMesh":
        v = self.vertices * scale
        if rotation is not None:
            v = v @ np.asarray(rotation).T
        if translation is not None:
            v = v + np.asarray(translation)
        return TriangleMesh.from_arrays(v, self.faces, validate=False)


def _face_cross(v, f):
    return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted unit vertex normals."""
    cr = _face_cross(vertices, faces)
    n = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(n, faces[:, k], cr)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    return n / norm


def validate_topology(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Check the closed-manifold invariants and return outward-wound faces.

    Raises `MeshError` naming the offending faces or edges. A mesh whose
    winding is consistent but inward (negative enclosed volume) is flipped.
    """
    if len(faces) == 0:
        raise MeshError("mesh has no faces")
    if faces.min() < 0 or faces.max() >= len(vertices):
        raise MeshError("face index out of range")
    if not np.all(np.isfinite(vertices)):
        raise MeshError("non-finite vertex coordinates")

    area2 = np.linalg.norm(_face_cross(vertices, faces), axis=1)
    scale = max(np.ptp(vertices, axis=0).max(), 1e-300)
    bad = np.flatnonzero(area2 <= 1e-14 * scale * scale)
    if len(bad):
        raise MeshError(f"degenerate (zero-area) faces: {bad[:10].tolist()}")

    directed = faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    undirected = np.sort(directed, axis=1)
    uniq, inverse, counts = np.unique(undirected, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if np.any(counts == 1):
        e = uniq[counts == 1]
        raise MeshError(f"open boundary: {len(e)} boundary edge(s), first {tuple(e[0].tolist())}")
    if np.any(counts > 2):
        e = uniq[counts > 2]
        raise MeshError(f"non-manifold edge(s): {len(e)} shared by >2 faces, first {tuple(e[0].tolist())}")

    # each undirected edge must appear once in each direction
    forward = directed[:, 0] < directed[:, 1]
    n_forward = np.bincount(inverse, weights=forward, minlength=len(uniq))
    if np.any(n_forward != 1):
        e = uniq[n_forward != 1]
        raise MeshError(f"inconsistent face winding at edge {tuple(e[0].tolist())}")

    vol = np.einsum("ij,ij->i", vertices[faces[:, 0]],
                    np.cross(vertices[faces[:, 1]], vertices[faces[:, 2]])).sum()
    if vol < 0:
        logger.info("mesh winding is inward; flipping face orientation")
        faces = faces[:, [0, 2, 1]].copy()
    return faces


# ---------------------------------------------------------------------------
# file formats

def load_mesh(path) -> TriangleMesh:
    """Read an OBJ or binary little-endian PLY triangle mesh and validate it."""
    path = Path(path)
    if not path.is_file():
        raise MeshError(f"mesh file not found: {path}")
    suffix = path.suffix.lower()
    try:
        if suffix == ".obj":
            v, f = _read_obj(path)
        elif suffix == ".ply":
            v, f = _read_ply(path)
        else:
            raise MeshError(f"unsupported mesh format {suffix!r} ({path})")
    except MeshError:
        raise
    except (ValueError, IndexError, struct.error, UnicodeDecodeError) as exc:
        raise MeshError(f"failed to parse {path}: {exc}") from exc
    try:
        return TriangleMesh.from_arrays(v, f)
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from exc


def save_mesh(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        with open(path, "w") as fh:
            for x, y, z in mesh.vertices.tolist():
                fh.write(f"v {x!r} {y!r} {z!r}\n")
            for a, b, c in (mesh.faces + 1).tolist():
                fh.write(f"f {a} {b} {c}\n")
    elif suffix == ".ply":
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {mesh.n_vertices}\n"
            "property double x\nproperty double y\nproperty double z\n"
            f"element face {mesh.n_faces}\n"
            "property list uchar int vertex_indices\nend_header\n"
        )
        face_dtype = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
        faces = np.empty(mesh.n_faces, dtype=face_dtype)
        faces["n"] = 3
        faces["idx"] = mesh.faces
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(mesh.vertices.astype("<f8").tobytes())
            fh.write(faces.tobytes())
    else:
        raise MeshError(f"unsupported mesh format {suffix!r}")


def _read_obj(path: Path):
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshError(f"{path}:{lineno}: vertex needs 3 coordinates")
                verts.append([float(t) for t in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(t.split("/")[0]) for t in parts[1:]]
                if len(idx) != 3:
                    raise MeshError(f"{path}:{lineno}: only triangular faces are supported")
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    if not verts:
        raise MeshError(f"{path}: no vertices")
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply(path: Path):
    raw = path.read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise MeshError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii").splitlines()
    fmt = None
    elements: list[tuple[str, int, list]] = []
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            elements[-1][2].append(tok[1:])
    if fmt != "binary_little_endian":
        raise MeshError(f"{path}: only binary_little_endian PLY is supported (got {fmt})")

    offset = body_start
    verts = faces = None
    for name, count, props in elements:
        if name == "vertex":
            dtype = np.dtype([(p[1], "<" + _PLY_TYPES[p[0]]) for p in props])
            arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
            offset += dtype.itemsize * count
            verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
        elif name == "face":
            if len(props) != 1 or props[0][0] != "list":
                raise MeshError(f"{path}: face element must hold a single list property")
            ct, it = "<" + _PLY_TYPES[props[0][1]], "<" + _PLY_TYPES[props[0][2]]
            dtype = np.dtype([("n", ct), ("idx", it, (3,))])
            arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
            if np.any(arr["n"] != 3):
                raise MeshError(f"{path}: only triangular faces are supported")
            offset += dtype.itemsize * count
            faces = arr["idx"].astype(np.int64)
        else:
            dtype = np.dtype([(p[1], "<" + _PLY_TYPES[p[0]]) for p in props])
            offset += dtype.itemsize * count
    if verts is None or faces is None:
        raise MeshError(f"{path}: missing vertex or face element")
    return verts, faces


# ---------------------------------------------------------------------------
# closest-point queries

def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p, row-wise.

    Returns the closest points and a region code (FACE, VERT_*, EDGE_*) telling
    which feature of the triangle the closest point lies on.
    """
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    p, a, b, c = np.broadcast_arrays(p, a, b, c)
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    n = len(p)
    out = np.empty((n, 3))
    region = np.full(n, -1, dtype=np.int8)
    todo = np.ones(n, dtype=bool)

    def assign(mask, pts, code):
        nonlocal todo
        m = todo & mask
        out[m] = pts[m] if pts.ndim == 2 else pts
        region[m] = code
        todo = todo & ~m

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), a, VERT_A)
        assign((d3 >= 0) & (d4 <= d3), b, VERT_B)
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab, EDGE_AB)
        assign((d6 >= 0) & (d5 <= d6), c, VERT_C)
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac, EDGE_CA)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + w[:, None] * (c - b), EDGE_BC)
        denom = 1.0 / (va + vb + vc)
        v, w = vb * denom, vc * denom
        assign(np.ones(n, dtype=bool), a + v[:, None] * ab + w[:, None] * ac, FACE)
    return out, region


class MeshProximity:
    """Exact closest-point and signed-distance queries against one mesh.

    Triangles sit in a bounding-sphere hierarchy; subtrees whose sphere lies
    farther than the best distance found so far are skipped.
    Signs use angle-weighted pseudonormals of the closest feature, which agree
    with the winding-number sign for closed, consistently oriented meshes.
    """

    def __init__(self, mesh: TriangleMesh):
        self.mesh = mesh
        v, f = mesh.vertices, mesh.faces
        self._tri = np.ascontiguousarray(v[f])  # (F, 3, 3)
        self._build_leaves(self._tri.mean(axis=1))
        self._build_pseudonormals()

    def _build_pseudonormals(self):
        v, f = self.mesh.vertices, self.mesh.faces
        fn = self.mesh.face_normals
        vn = np.zeros_like(v)
        for k in range(3):
            e1 = v[f[:, (k + 1) % 3]] - v[f[:, k]]
            e2 = v[f[:, (k + 2) % 3]] - v[f[:, k]]
            cosang = np.einsum("ij,ij->i", e1, e2) / (
                np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))
            ang = np.arccos(np.clip(cosang, -1.0, 1.0))
            np.add.at(vn, f[:, k], ang[:, None] * fn)
        self._vertex_pn = vn
        # edge pseudonormal: sum of the two incident face normals
        directed = f[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        und = np.sort(directed, axis=1)
        uniq, inv = np.unique(und, axis=0, return_inverse=True)
        inv = inv.ravel()
        en = np.zeros((len(uniq), 3))
        np.add.at(en, inv, np.repeat(fn, 3, axis=0))
        # per face, edges in order AB, BC, CA
        self._face_edge_pn = en[inv].reshape(-1, 3, 3)

    def _build_leaves(self, centroids, leaf_size=8):
        """Median-split bounding-sphere hierarchy over triangle centroids."""
        order: list[np.ndarray] = []
        child, rng, center, radius = [], [], [], []

        def build(idx):
            node = len(child)
            child.append([-1, -1])
            rng.append([0, 0])
            pts = self._tri[idx].reshape(-1, 3)
            c = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
            center.append(c)
            radius.append(np.linalg.norm(pts - c, axis=1).max() * (1 + 1e-12))
            if len(idx) <= leaf_size:
                start = sum(len(o) for o in order)
                order.append(idx)
                rng[node] = [start, start + len(idx)]
                return node
            cc = centroids[idx]
            axis = int(np.argmax(np.ptp(cc, axis=0)))
            srt = idx[np.argsort(cc[:, axis], kind="stable")]
            half = len(srt) // 2
            left = build(srt[:half])
            right = build(srt[half:])
            child[node] = [left, right]
            return node

        build(np.arange(len(centroids)))
        self._order = np.concatenate(order).astype(np.int64)
        self._node_child = np.array(child, dtype=np.int64)
        self._node_range = np.array(rng, dtype=np.int64)
        self._node_center = np.array(center)
        self._node_radius = np.array(radius)

    def closest_points(self, points):
        """Exact closest points on the mesh.

        Returns (distance, closest point, face index, region code).
        """
        pts = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=np.float64)))
        return _kernels.nearest_bvh(pts, self._tri, self._order, self._node_child,
                                    self._node_range, self._node_center, self._node_radius)

    def _pseudonormal(self, face, region):
        f = self.mesh.faces[face]
        pn = np.array(self.mesh.face_normals[face])
        for code, k in ((VERT_A, 0), (VERT_B, 1), (VERT_C, 2)):
            m = region == code
            pn[m] = self._vertex_pn[f[m, k]]
        for code, k in ((EDGE_AB, 0), (EDGE_BC, 1), (EDGE_CA, 2)):
            m = region == code
            pn[m] = self._face_edge_pn[face[m], k]
        return pn

    def signed_distance(self, points) -> np.ndarray:
        """Exact signed distance, negative inside."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d, q, f, r = self.closest_points(pts)
        pn = self._pseudonormal(f, r)
        side = np.einsum("ij,ij->i", pts - q, pn)
        return np.where(side < 0, -d, d)

    def unsigned_distance(self, points) -> np.ndarray:
        return self.closest_points(points)[0]

    def project(self, points) -> np.ndarray:
        return self.closest_points(points)[1]


def winding_number(mesh: TriangleMesh, points) -> np.ndarray:
    """Generalized winding number (solid angle / 4π), brute force over faces."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri = mesh.vertices[mesh.faces]
    out = np.zeros(len(pts))
    for i, p in enumerate(pts):
        a, b, c = (tri[:, k] - p for k in range(3))
        la, lb, lc = (np.linalg.norm(x, axis=1) for x in (a, b, c))
        num = np.einsum("ij,ij->i", a, np.cross(b, c))
        den = (la * lb * lc + np.einsum("ij,ij->i", a, b) * lc
               + np.einsum("ij,ij->i", b, c) * la + np.einsum("ij,ij->i", c, a) * lb)
        out[i] = 2.0 * np.arctan2(num, den).sum() / (4.0 * np.pi)
    return out


# ---------------------------------------------------------------------------
# canonical meshes

def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Subdivided icosahedron projected onto a sphere (10*4**n + 2 vertices)."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    f = faces
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    vv = np.array(v)
    return TriangleMesh.from_arrays(vv * radius + np.asarray(center), np.array(f), normals=vv)


def unit_cube() -> TriangleMesh:
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                  [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=np.float64)
    f = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
                  [0, 1, 5], [0, 5, 4], [2, 3, 7], [2, 7, 6],
                  [1, 2, 6], [1, 6, 5], [0, 4, 7], [0, 7, 3]])
    return TriangleMesh.from_arrays(v, f)
