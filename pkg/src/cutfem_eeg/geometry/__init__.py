"""Level-set geometry over a regular hexahedral background mesh."""

from .cutting import (
    CUT,
    CutCellPartition,
    build_partition,
    build_submeshes,
    classify_cell,
    classify_cells,
    cut_cell,
)
from .levelset import (
    GridLevelSet,
    LevelSetField,
    SphereLevelSet,
    eval_level_set,
    read_lsgrid,
    write_lsgrid,
)
from .mesh import EXTERIOR, BackgroundMesh, Compartment, CompartmentModel
from .quadrature import (
    simplex_volume,
    tet_rule,
    tri_rule,
    triangle_area,
)

__all__ = [
    "CUT",
    "EXTERIOR",
    "BackgroundMesh",
    "Compartment",
    "CompartmentModel",
    "CutCellPartition",
    "GridLevelSet",
    "LevelSetField",
    "SphereLevelSet",
    "build_partition",
    "build_submeshes",
    "classify_cell",
    "classify_cells",
    "cut_cell",
    "eval_level_set",
    "read_lsgrid",
    "write_lsgrid",
    "simplex_volume",
    "tet_rule",
    "tri_rule",
    "triangle_area",
]
