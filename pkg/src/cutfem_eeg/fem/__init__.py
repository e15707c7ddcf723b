"""Trial spaces and CutFEM system assembly."""

from .assembly import (
    InterfaceWeights,
    MatrixAccumulator,
    SparseSystem,
    assemble_ghost,
    assemble_load,
    assemble_nitsche,
    assemble_system,
    assemble_volume,
    interface_weights,
)
from .basis import hex_stiffness, shape_gradients, shape_values
from .space import TrialSpace, build_trial_space

__all__ = [
    "InterfaceWeights",
    "MatrixAccumulator",
    "SparseSystem",
    "TrialSpace",
    "assemble_ghost",
    "assemble_load",
    "assemble_nitsche",
    "assemble_system",
    "assemble_volume",
    "build_trial_space",
    "hex_stiffness",
    "interface_weights",
    "shape_gradients",
    "shape_values",
]
