"""Per-compartment Q1 trial spaces over overlapping submeshes.

The global space is the direct sum of the compartment spaces: a
background vertex shared by k submeshes owns k distinct degrees of
freedom.  DOF indices are contiguous, ordered compartment-major and by
vertex index within each compartment, which makes the layout
deterministic for a given submesh input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError
from ..geometry.mesh import BackgroundMesh


@dataclass
class TrialSpace:
    mesh: BackgroundMesh
    submeshes: list                      # per slot: sorted cell indices
    dof_map: np.ndarray                  # (nslots, nvertices) -> dof or -1
    offsets: np.ndarray                  # (nslots+1,)
    dof_vertex: np.ndarray               # (N,) global vertex id per dof
    dof_slot: np.ndarray                 # (N,) compartment slot per dof
    _in_submesh: np.ndarray = field(repr=False, default=None)

    @property
    def n_dofs(self) -> int:
        return len(self.dof_vertex)

    @property
    def n_slots(self) -> int:
        return len(self.submeshes)

    def cell_dofs(self, slot, cells) -> np.ndarray:
        """DOF ids of the 8 vertices of each cell in compartment ``slot``.

        ``slot`` may be a scalar or an array aligned with ``cells``.
        """
        vids = self.mesh.cell_vertex_ids(np.asarray(cells))
        slot = np.asarray(slot)
        if slot.ndim == 0:
            dofs = self.dof_map[int(slot)][vids]
        else:
            dofs = self.dof_map[slot[..., None], vids]
        return dofs

    def in_submesh(self, slot: int, cells) -> np.ndarray:
        return self._in_submesh[slot][np.asarray(cells)]

    def dof_positions(self) -> np.ndarray:
        """Physical coordinates of every DOF's vertex, shape (N,3)."""
        return self.mesh.vertex_coords(self.dof_vertex)

    def interpolate(self, fn) -> np.ndarray:
        """DOF vector of the vertex interpolant of ``fn(points)->values``."""
        return np.asarray(fn(self.dof_positions()), dtype=float)


def build_trial_space(mesh: BackgroundMesh, submeshes) -> TrialSpace:
    """Build the direct-sum Q1 space from per-compartment cell lists."""
    submeshes = [np.asarray(np.unique(c), dtype=np.int64) for c in submeshes]
    if any(len(c) == 0 for c in submeshes):
        raise ConfigurationError("every compartment needs a non-empty submesh")
    nslots = len(submeshes)
    nverts = mesh.n_vertices
    dof_map = np.full((nslots, nverts), -1, dtype=np.int64)
    offsets = np.zeros(nslots + 1, dtype=np.int64)
    dof_vertex_parts = []
    dof_slot_parts = []
    in_sub = np.zeros((nslots, mesh.n_cells), dtype=bool)
    n = 0
    for slot, cells in enumerate(submeshes):
        verts = np.unique(mesh.cell_vertex_ids(cells))
        dof_map[slot, verts] = n + np.arange(len(verts))
        n += len(verts)
        offsets[slot + 1] = n
        dof_vertex_parts.append(verts)
        dof_slot_parts.append(np.full(len(verts), slot, dtype=np.int32))
        in_sub[slot, cells] = True
    return TrialSpace(
        mesh=mesh,
        submeshes=submeshes,
        dof_map=dof_map,
        offsets=offsets,
        dof_vertex=np.concatenate(dof_vertex_parts),
        dof_slot=np.concatenate(dof_slot_parts),
        _in_submesh=in_sub,
    )
