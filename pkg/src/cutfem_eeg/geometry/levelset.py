"""Level-set fields describing tissue compartments.

A level set is negative inside its compartment, zero on the boundary and
positive outside.  Two kinds are supported: analytic spheres and sampled
voxel grids evaluated with trilinear interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import GeometryError

_BOUNDS_EPS = 1e-9


class LevelSetField:
    """Common interface of the level-set kinds."""

    def __call__(self, points):
        raise NotImplementedError

    def gradient(self, points):
        raise NotImplementedError

    def bounding_box(self):
        """(lo, hi) box containing the zero surface."""
        raise NotImplementedError


@dataclass(frozen=True)
class SphereLevelSet(LevelSetField):
    """Signed distance to a sphere: |x - center| - radius."""

    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "radius", float(self.radius))
        if self.radius <= 0.0:
            raise GeometryError(f"sphere radius must be positive, got {self.radius}")

    def __call__(self, points):
        p = np.asarray(points, dtype=float)
        d = np.linalg.norm(p - np.asarray(self.center), axis=-1)
        return d - self.radius

    def gradient(self, points):
        p = np.asarray(points, dtype=float)
        r = p - np.asarray(self.center)
        d = np.linalg.norm(r, axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            g = np.where(d > 0.0, r / d, 0.0)
        return g

    def bounding_box(self):
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class GridLevelSet(LevelSetField):
    """Level set sampled on a regular vertex grid, trilinearly interpolated.

    ``values`` has shape ``dims`` (nx, ny, nz) with vertex spacing
    ``spacing`` starting at ``origin``.  Evaluating outside the grid is an
    error.
    """

    origin: tuple
    spacing: tuple
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))
        object.__setattr__(self, "spacing", tuple(float(c) for c in self.spacing))
        vals = np.ascontiguousarray(self.values, dtype=float)
        if vals.ndim != 3 or min(vals.shape) < 2:
            raise GeometryError("sampled grid needs a 3-d value array with >= 2 samples per axis")
        if min(self.spacing) <= 0.0:
            raise GeometryError("grid spacing must be positive")
        object.__setattr__(self, "values", vals)

    @property
    def dims(self):
        return self.values.shape

    def _local(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        t = (p - np.asarray(self.origin)) / np.asarray(self.spacing)
        upper = np.asarray(self.dims) - 1.0
        tol = _BOUNDS_EPS * max(self.dims)
        if np.any(t < -tol) or np.any(t > upper + tol):
            bad = p[np.any((t < -tol) | (t > upper + tol), axis=1)][0]
            raise GeometryError(f"point {tuple(bad)} outside sampled level-set grid")
        t = np.clip(t, 0.0, upper - 1e-12)
        i = t.astype(np.int64)
        i = np.minimum(i, (np.asarray(self.dims) - 2))
        f = t - i
        return i, f

    def __call__(self, points):
        p = np.asarray(points, dtype=float)
        squeeze = p.ndim == 1
        i, f = self._local(p)
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        v = self.values
        ix, iy, iz = i[:, 0], i[:, 1], i[:, 2]
        out = np.zeros(len(i))
        for dx in (0, 1):
            wx = fx if dx else 1.0 - fx
            for dy in (0, 1):
                wy = fy if dy else 1.0 - fy
                for dz in (0, 1):
                    wz = fz if dz else 1.0 - fz
                    out += wx * wy * wz * v[ix + dx, iy + dy, iz + dz]
        return out[0] if squeeze else out

    def gradient(self, points):
        """Gradient of the trilinear interpolant (exact within each voxel)."""
        p = np.asarray(points, dtype=float)
        squeeze = p.ndim == 1
        i, f = self._local(p)
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        v = self.values
        ix, iy, iz = i[:, 0], i[:, 1], i[:, 2]
        g = np.zeros((len(i), 3))
        for dx in (0, 1):
            wx, dwx = (fx, 1.0) if dx else (1.0 - fx, -1.0)
            for dy in (0, 1):
                wy, dwy = (fy, 1.0) if dy else (1.0 - fy, -1.0)
                for dz in (0, 1):
                    wz, dwz = (fz, 1.0) if dz else (1.0 - fz, -1.0)
                    val = v[ix + dx, iy + dy, iz + dz]
                    g[:, 0] += dwx * wy * wz * val
                    g[:, 1] += wx * dwy * wz * val
                    g[:, 2] += wx * wy * dwz * val
        g /= np.asarray(self.spacing)
        return g[0] if squeeze else g

    def bounding_box(self):
        lo = np.asarray(self.origin)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)
        return lo, hi


def eval_level_set(level_set: LevelSetField, point):
    """Signed level-set value at one point (negative inside)."""
    return float(level_set(np.asarray(point, dtype=float)))


def read_lsgrid(path) -> GridLevelSet:
    """Read a sampled level set from an LSGRID volume file.

    Format: ASCII header line ``LSGRID nx ny nz ox oy oz sx sy sz``
    followed by nx*ny*nz little-endian 32-bit floats, x fastest.
    """
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 10 or header[0] != "LSGRID":
            raise GeometryError(f"{path}: not an LSGRID file")
        nx, ny, nz = (int(t) for t in header[1:4])
        origin = tuple(float(t) for t in header[4:7])
        spacing = tuple(float(t) for t in header[7:10])
        raw = fh.read(4 * nx * ny * nz)
        if len(raw) != 4 * nx * ny * nz:
            raise GeometryError(f"{path}: truncated LSGRID payload")
    vals = np.frombuffer(raw, dtype="<f4").astype(float)
    # x-fastest layout -> index order [x, y, z]
    vals = vals.reshape(nz, ny, nx).transpose(2, 1, 0)
    return GridLevelSet(origin=origin, spacing=spacing, values=vals)


def write_lsgrid(path, grid: GridLevelSet) -> None:
    """Write a GridLevelSet in the LSGRID volume format."""
    nx, ny, nz = grid.dims
    header = "LSGRID %d %d %d %.17g %.17g %.17g %.17g %.17g %.17g\n" % (
        nx, ny, nz, *grid.origin, *grid.spacing)
    payload = grid.values.transpose(2, 1, 0).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)
