"""Regular hexahedral background mesh and the compartment model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, GeometryError
from .levelset import LevelSetField

EXTERIOR = -1


@dataclass(frozen=True)
class BackgroundMesh:
    """Axis-aligned regular mesh of cubic cells with edge length ``h``."""

    origin: tuple
    h: float
    dims: tuple  # cells per axis

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))
        object.__setattr__(self, "h", float(self.h))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.h <= 0.0:
            raise GeometryError("cell size must be positive")
        if min(self.dims) < 1:
            raise GeometryError("mesh needs at least one cell per axis")

    @property
    def n_cells(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def vertex_dims(self):
        return tuple(d + 1 for d in self.dims)

    @property
    def n_vertices(self) -> int:
        vx, vy, vz = self.vertex_dims
        return vx * vy * vz

    def cell_index(self, ijk) -> np.ndarray:
        """Linear cell index, x fastest."""
        ijk = np.asarray(ijk)
        nx, ny, _ = self.dims
        return ijk[..., 0] + nx * (ijk[..., 1] + ny * ijk[..., 2])

    def cell_ijk(self, index) -> np.ndarray:
        index = np.asarray(index)
        nx, ny, _ = self.dims
        i = index % nx
        j = (index // nx) % ny
        k = index // (nx * ny)
        return np.stack([i, j, k], axis=-1)

    def vertex_index(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk)
        vx, vy, _ = self.vertex_dims
        return ijk[..., 0] + vx * (ijk[..., 1] + vy * ijk[..., 2])

    def vertex_coords(self, index) -> np.ndarray:
        index = np.asarray(index)
        vx, vy, _ = self.vertex_dims
        i = index % vx
        j = (index // vx) % vy
        k = index // (vx * vy)
        ijk = np.stack([i, j, k], axis=-1)
        return np.asarray(self.origin) + self.h * ijk

    def cell_vertex_ids(self, cell_index) -> np.ndarray:
        """Vertex indices of cells, shape (...,8), local order x fastest."""
        ijk = self.cell_ijk(cell_index)
        offs = np.array([[dx, dy, dz] for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)])
        return self.vertex_index(ijk[..., None, :] + offs)

    def cell_origin(self, cell_index) -> np.ndarray:
        return np.asarray(self.origin) + self.h * self.cell_ijk(cell_index)

    def locate(self, points) -> np.ndarray:
        """Cell index containing each point; points on upper faces are
        assigned to the last cell.  Raises for points outside the mesh."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        t = (p - np.asarray(self.origin)) / self.h
        dims = np.asarray(self.dims)
        tol = 1e-9 * max(self.dims)
        if np.any(t < -tol) or np.any(t > dims + tol):
            bad = p[np.any((t < -tol) | (t > dims + tol), axis=1)][0]
            raise GeometryError(f"point {tuple(bad)} outside the background mesh")
        ijk = np.minimum(np.maximum(t.astype(np.int64), 0), dims - 1)
        idx = self.cell_index(ijk)
        return idx if np.asarray(points).ndim > 1 else int(idx[0])

    def covers_box(self, lo, hi) -> bool:
        mlo = np.asarray(self.origin)
        mhi = mlo + self.h * np.asarray(self.dims)
        return bool(np.all(np.asarray(lo) >= mlo - 1e-9 * self.h)
                    and np.all(np.asarray(hi) <= mhi + 1e-9 * self.h))


@dataclass(frozen=True)
class Compartment:
    """One tissue compartment: id, level set and conductivity tensor."""

    compartment_id: int
    level_set: LevelSetField
    conductivity: np.ndarray  # symmetric 3x3, S/m
    name: str = ""

    def __post_init__(self):
        sigma = np.asarray(self.conductivity, dtype=float)
        if sigma.shape == ():
            sigma = float(sigma) * np.eye(3)
        if sigma.shape != (3, 3):
            raise ConfigurationError("conductivity must be scalar or a 3x3 tensor")
        if not np.allclose(sigma, sigma.T, atol=1e-12 * max(1.0, abs(sigma).max())):
            raise ConfigurationError("conductivity tensor must be symmetric")
        if np.any(np.linalg.eigvalsh(sigma) <= 0.0):
            raise ConfigurationError("conductivity tensor must be positive definite")
        object.__setattr__(self, "conductivity", sigma)


class CompartmentModel:
    """Ordered list of compartments, innermost first.

    A point belongs to the first listed compartment whose level set is
    negative there; points where no level set is negative are exterior.
    """

    def __init__(self, compartments):
        comps = list(compartments)
        if not comps:
            raise ConfigurationError("a compartment model needs at least one compartment")
        ids = [c.compartment_id for c in comps]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate compartment ids")
        self.compartments = comps

    def __len__(self):
        return len(self.compartments)

    def __iter__(self):
        return iter(self.compartments)

    def __getitem__(self, k):
        return self.compartments[k]

    def classify_points(self, points) -> np.ndarray:
        """Compartment slot (position in the list) per point, EXTERIOR outside.

        A level-set value of exactly zero counts as inside, matching the
        deterministic sign perturbation used by the cut algorithm.
        """
        p = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.full(len(p), EXTERIOR, dtype=np.int32)
        undecided = np.ones(len(p), dtype=bool)
        for slot, comp in enumerate(self.compartments):
            if not undecided.any():
                break
            vals = comp.level_set(p[undecided])
            inside = vals <= 0.0
            idx = np.flatnonzero(undecided)[inside]
            out[idx] = slot
            undecided[idx] = False
        if np.asarray(points).ndim == 1:
            return int(out[0])
        return out

    def bounding_box(self):
        los, his = zip(*(c.level_set.bounding_box() for c in self.compartments))
        return np.min(los, axis=0), np.max(his, axis=0)

    def check_mesh(self, mesh: BackgroundMesh) -> None:
        lo, hi = self.bounding_box()
        if not mesh.covers_box(lo, hi):
            raise ConfigurationError(
                "background mesh does not cover the level-set bounding box "
                f"({tuple(lo)} .. {tuple(hi)})")
