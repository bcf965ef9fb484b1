"""Signed distance volumes: voxelization from meshes, trilinear queries, raw I/O.

Volume file layout::

    dims 32 32 32
    origin -1.6 -1.6 -1.6
    spacing 0.1 0.1 0.1
    dtype f32
    <blank line>
    <row-major little-endian raw values, x slowest, z fastest>
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import VolumeError
from .mesh import TriangleMesh

logger = logging.getLogger(__name__)

DEFAULT_VOXEL_BUDGET = 20_000_000
_DTYPES = {"f32": "<f4", "f64": "<f8"}


class SignedDistanceVolume:
    """Regular grid of signed distances (negative inside) with gradient grids.

    Values between nodes are trilinearly interpolated. Points outside the grid
    are clamped to the boundary and counted in `clamp_events`.
    """

    def __init__(self, origin, spacing, values, gradients=None):
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.spacing = np.asarray(spacing, dtype=np.float64).reshape(3)
        if np.any(self.spacing <= 0) or not np.all(np.isfinite(self.spacing)):
            raise VolumeError(f"non-positive spacing {self.spacing.tolist()}")
        values = np.asarray(values)
        if values.ndim != 3 or min(values.shape) < 2:
            raise VolumeError(f"values must be a 3D grid with >=2 nodes per axis, got {values.shape}")
        self.values = values
        self.values.setflags(write=False)
        if gradients is None:
            gradients = np.stack(np.gradient(values.astype(np.float64), *self.spacing), axis=-1)
        self.gradients = np.asarray(gradients, dtype=np.float64)
        if self.gradients.shape != values.shape + (3,):
            raise VolumeError("gradient grid shape does not match values")
        self.gradients.setflags(write=False)
        self._values64 = values.astype(np.float64)
        self.clamp_events = 0

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def max_spacing(self) -> float:
        return float(self.spacing.max())

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.spacing * (np.array(self.dims) - 1)

    def _coords(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        idx = (pts - self.origin) / self.spacing
        hi = np.array(self.dims, dtype=np.float64) - 1
        outside = np.any((idx < 0) | (idx > hi), axis=1)
        n_out = int(outside.sum())
        if n_out:
            self.clamp_events += n_out
            logger.debug("%d query point(s) outside the SDF grid were clamped", n_out)
            idx = np.clip(idx, 0, hi)
        return idx.T

    def query(self, points) -> np.ndarray:
        """Trilinearly interpolated signed distance at each point."""
        c = self._coords(points)
        return ndimage.map_coordinates(self._values64, c, order=1, mode="nearest")

    def gradient(self, points) -> np.ndarray:
        c = self._coords(points)
        return np.stack([ndimage.map_coordinates(self.gradients[..., k], c, order=1, mode="nearest")
                         for k in range(3)], axis=1)

    def node_positions(self) -> np.ndarray:
        axes = [self.origin[k] + self.spacing[k] * np.arange(self.dims[k]) for k in range(3)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack([x.ravel() for x in g], axis=1)


def voxelize_sdf(mesh: TriangleMesh, spacing: float, padding: float,
                 voxel_budget: int = DEFAULT_VOXEL_BUDGET) -> SignedDistanceVolume:
    """Exact signed distance to `mesh` sampled on a grid covering its padded bbox."""
    if spacing <= 0:
        raise VolumeError("spacing must be positive")
    if padding < 2 * spacing:
        raise VolumeError(f"padding {padding} must be at least 2 x spacing ({2 * spacing})")
    lo, hi = mesh.bounds
    lo = lo - padding
    hi = hi + padding
    dims = np.ceil((hi - lo) / spacing).astype(int) + 1
    n = int(np.prod(dims))
    if n > voxel_budget:
        raise VolumeError(f"grid {dims.tolist()} needs {n} voxels, budget is {voxel_budget}")
    # center the grid on the padded box
    origin = (lo + hi) / 2 - spacing * (dims - 1) / 2
    vol = SignedDistanceVolume(origin, [spacing] * 3, np.zeros(tuple(dims), dtype=np.float32))
    pts = vol.node_positions()
    prox = mesh.proximity
    out = np.empty(len(pts))
    step = 100_000
    for s in range(0, len(pts), step):
        out[s:s + step] = prox.signed_distance(pts[s:s + step])
    return SignedDistanceVolume(origin, [spacing] * 3, out.reshape(tuple(dims)).astype(np.float32))


def save_sdf_volume(vol: SignedDistanceVolume, path) -> None:
    dt = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}.get(vol.values.dtype)
    if dt is None:
        raise VolumeError(f"unsupported value dtype {vol.values.dtype}")
    fmt = lambda a: " ".join(repr(float(x)) for x in a)  # noqa: E731
    header = (f"dims {' '.join(str(d) for d in vol.dims)}\n"
              f"origin {fmt(vol.origin)}\nspacing {fmt(vol.spacing)}\ndtype {dt}\n\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(vol.values, dtype=_DTYPES[dt]).tobytes())


def load_sdf_volume(path) -> SignedDistanceVolume:
    path = Path(path)
    if not path.is_file():
        raise VolumeError(f"volume file not found: {path}")
    raw = path.read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise VolumeError(f"{path}: missing blank line after header")
    fields = {}
    for line in raw[:sep].decode("ascii", errors="replace").splitlines():
        tok = line.split()
        if tok:
            fields[tok[0]] = tok[1:]
    try:
        dims = tuple(int(x) for x in fields["dims"])
        origin = [float(x) for x in fields["origin"]]
        spacing = [float(x) for x in fields["spacing"]]
        dtype = _DTYPES[fields.get("dtype", ["f32"])[0]]
    except (KeyError, ValueError) as exc:
        raise VolumeError(f"{path}: bad header ({exc})") from exc
    if len(dims) != 3 or len(origin) != 3 or len(spacing) != 3:
        raise VolumeError(f"{path}: dims/origin/spacing need three components")
    if any(s <= 0 for s in spacing):
        raise VolumeError(f"{path}: non-positive spacing {spacing}")
    data = raw[sep + 2:]
    expected = int(np.prod(dims)) * np.dtype(dtype).itemsize
    if len(data) != expected:
        raise VolumeError(f"{path}: data size mismatch (header implies {expected} bytes, found {len(data)})")
    values = np.frombuffer(data, dtype=dtype).reshape(dims).astype(dtype[1:])
    return SignedDistanceVolume(origin, spacing, values)
