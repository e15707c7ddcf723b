"""Assembly of the CutFEM bilinear form and source load vectors.

The stiffness matrix is the sum of three parts:

* volume:   sum_i int_{Omega_i} sigma grad(u_i) . grad(v_i)
* Nitsche:  - int_G {sigma grad u}.[[v]]  +/- int_G {sigma grad v}.[[u]]
            + gamma nu int_G (sigma_hat/h) [[u]].[[v]]
* ghost:    gamma_G int_Ghat h [[sigma grad u]] [[grad v]]

with conductivity-weighted interface averages (weights
delta_E/(delta_E+delta_F), delta = n^T sigma n) and the non-symmetric
("nwipg", '+' sign, unconditionally coercive) or symmetric ("swipg",
'-' sign) variant of the consistency terms.  The ghost penalty couples
gradient jumps across full faces of cut cells, once per compartment
space active on both neighbouring cells; the conductivity sits on the
trial side only (symmetric for the isotropic tensors used here).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..errors import ConfigurationError, SourceError
from ..geometry.cutting import CutCellPartition
from ..geometry.mesh import CompartmentModel
from ..geometry.quadrature import tet_rule, tri_rule
from .basis import VERTEX_OFFSETS, hex_stiffness, shape_gradients, shape_values
from .space import TrialSpace

log = logging.getLogger(__name__)

VARIANTS = ("nwipg", "swipg")

_SNIPPET_CHUNK = 8192
_FACET_CHUNK = 16384


class MatrixAccumulator:
    """Triplet accumulator flushing to CSR to bound memory."""

    def __init__(self, n: int, flush_at: int = 6_000_000):
        self.n = n
        self.flush_at = flush_at
        self._rows, self._cols, self._vals = [], [], []
        self._pending = 0
        self._mat = None

    def add(self, rows, cols, vals):
        rows = np.asarray(rows).ravel()
        self._rows.append(rows)
        self._cols.append(np.asarray(cols).ravel())
        self._vals.append(np.asarray(vals).ravel())
        self._pending += len(rows)
        if self._pending >= self.flush_at:
            self._flush()

    def add_blocks(self, dofs, blocks):
        """dofs (B,k), blocks (B,k,k)."""
        k = dofs.shape[1]
        rows = np.repeat(dofs, k, axis=1)
        cols = np.tile(dofs, (1, k))
        self.add(rows, cols, blocks)

    def _flush(self):
        if not self._pending:
            return
        m = sp.coo_matrix(
            (np.concatenate(self._vals),
             (np.concatenate(self._rows), np.concatenate(self._cols))),
            shape=(self.n, self.n)).tocsr()
        self._mat = m if self._mat is None else self._mat + m
        self._rows, self._cols, self._vals = [], [], []
        self._pending = 0

    def tocsr(self) -> sp.csr_matrix:
        self._flush()
        if self._mat is None:
            return sp.csr_matrix((self.n, self.n))
        self._mat.sum_duplicates()
        return self._mat


@dataclass(frozen=True)
class InterfaceWeights:
    """Conductivity-based weights of one interface facet."""

    omega_e: float
    omega_f: float
    delta_e: float
    delta_f: float
    sigma_hat: float
    h_hat: float
    nu_k: float = 1.0


def interface_weights(sigma_e, sigma_f, normal, h_hat: float) -> InterfaceWeights:
    """Weights for sides E, F with unit normal pointing E -> F."""
    n = np.asarray(normal, dtype=float)
    de = float(n @ np.asarray(sigma_e) @ n)
    df = float(n @ np.asarray(sigma_f) @ n)
    if de <= 0.0 or df <= 0.0:
        raise ConfigurationError("interface weights need positive definite tensors")
    s = de + df
    return InterfaceWeights(omega_e=de / s, omega_f=df / s, delta_e=de,
                            delta_f=df, sigma_hat=2.0 * de * df / s, h_hat=h_hat)


def assemble_volume(space: TrialSpace, partition: CutCellPartition,
                    model: CompartmentModel, order: int = 2,
                    acc: MatrixAccumulator | None = None) -> MatrixAccumulator:
    """Volume stiffness: full-cell Gauss on interior cells, snippet
    quadrature on cut cells.

    Cut cells whose snippets of one compartment cover the whole cell are
    assembled with the exact full-cell element matrix, so a nominally cut
    cell with single-compartment content matches an interior cell exactly.
    """
    mesh = space.mesh
    h = mesh.h
    if acc is None:
        acc = MatrixAccumulator(space.n_dofs)
    ref_elem = [hex_stiffness(comp.conductivity, h) for comp in model]

    for slot in range(len(model)):
        cells = np.flatnonzero(partition.classification == slot)
        if not len(cells):
            continue
        dofs = space.cell_dofs(slot, cells)
        blocks = np.broadcast_to(ref_elem[slot], (len(cells), 8, 8))
        acc.add_blocks(dofs, blocks)

    sel = np.flatnonzero(partition.snip_slot >= 0)
    if not len(sel):
        return acc
    owner = partition.snip_owner[sel]
    slot = partition.snip_slot[sel].astype(np.int64)
    key = owner * len(model) + slot
    ukey, inv = np.unique(key, return_inverse=True)
    nblocks = len(ukey)
    blocks = np.zeros((nblocks, 8, 8))
    covered = np.zeros(nblocks)
    np.add.at(covered, inv, partition.snip_vol[sel])

    sigmas = np.stack([comp.conductivity for comp in model])
    for lo in range(0, len(sel), _SNIPPET_CHUNK):
        rows = sel[lo:lo + _SNIPPET_CHUNK]
        binv = inv[lo:lo + _SNIPPET_CHUNK]
        verts = partition.snip_verts[rows]
        pts, w = tet_rule(verts, order)
        corig = mesh.cell_origin(partition.snip_owner[rows])
        ref = (pts - corig[:, None, :]) / h
        g = shape_gradients(ref)
        sig = sigmas[partition.snip_slot[rows]]
        e = np.einsum("sq,sqai,sij,sqbj->sab", w, g, sig, g, optimize=True) / h ** 2
        np.add.at(blocks, binv, e)

    full = covered >= (1.0 - 1e-12) * h ** 3
    bslot = (ukey % len(model)).astype(np.int64)
    bowner = ukey // len(model)
    for s in range(len(model)):
        m = full & (bslot == s)
        if m.any():
            blocks[m] = ref_elem[s]
    acc.add_blocks(space.cell_dofs(bslot, bowner), blocks)
    return acc


def assemble_nitsche(space: TrialSpace, partition: CutCellPartition,
                     model: CompartmentModel, gamma: float,
                     variant: str = "nwipg", order: int = 2,
                     acc: MatrixAccumulator | None = None) -> MatrixAccumulator:
    """Interface coupling terms over all interface facets."""
    if gamma <= 0.0:
        raise ConfigurationError(f"Nitsche penalty gamma must be positive, got {gamma}")
    if variant not in VARIANTS:
        raise ConfigurationError(f"variant must be one of {VARIANTS}")
    sign = 1.0 if variant == "nwipg" else -1.0
    mesh = space.mesh
    h = mesh.h
    if acc is None:
        acc = MatrixAccumulator(space.n_dofs)
    n_f = len(partition.facet_area)
    if not n_f:
        return acc

    sigmas = np.stack([comp.conductivity for comp in model])
    si = partition.facet_pair[:, 0].astype(np.int64)
    sj = partition.facet_pair[:, 1].astype(np.int64)
    nrm = partition.facet_normal
    d_i = np.einsum("fi,fij,fj->f", nrm, sigmas[si], nrm)
    d_j = np.einsum("fi,fij,fj->f", nrm, sigmas[sj], nrm)
    w_i = d_i / (d_i + d_j)
    w_j = d_j / (d_i + d_j)
    sigma_hat = 2.0 * d_i * d_j / (d_i + d_j)
    c_pen = gamma * sigma_hat / h  # nu_k = 1 for Q1

    # accumulate per (cell, i, j) block
    nm = len(model)
    key = partition.facet_owner * nm * nm + si * nm + sj
    ukey, inv = np.unique(key, return_inverse=True)
    blocks = np.zeros((len(ukey), 16, 16))
    jump_sign = np.concatenate([np.ones(8), -np.ones(8)])

    for lo in range(0, n_f, _FACET_CHUNK):
        rows = slice(lo, min(lo + _FACET_CHUNK, n_f))
        verts = partition.facet_verts[rows]
        pts, w = tri_rule(verts, order)
        corig = mesh.cell_origin(partition.facet_owner[rows])
        ref = (pts - corig[:, None, :]) / h
        phi = shape_values(ref)                   # (F,Q,8)
        g = shape_gradients(ref) / h              # (F,Q,8,3) physical
        flux_i = np.einsum("fi,fij,fqaj->fqa", nrm[rows], sigmas[si[rows]], g,
                           optimize=True)
        flux_j = np.einsum("fi,fij,fqaj->fqa", nrm[rows], sigmas[sj[rows]], g,
                           optimize=True)
        flux = np.concatenate([w_i[rows, None, None] * flux_i,
                               w_j[rows, None, None] * flux_j], axis=2)
        jphi = np.concatenate([phi, -phi], axis=2)
        cons = np.einsum("fq,fqa,fqb->fab", w, jphi, flux, optimize=True)
        pen = np.einsum("f,fq,fqa,fqb->fab", c_pen[rows], w, jphi, jphi,
                        optimize=True)
        local = -cons + sign * cons.transpose(0, 2, 1) + pen
        np.add.at(blocks, inv[rows], local)

    bowner = ukey // (nm * nm)
    bi = (ukey // nm) % nm
    bj = ukey % nm
    dofs = np.concatenate([space.cell_dofs(bi, bowner),
                           space.cell_dofs(bj, bowner)], axis=1)
    if (dofs < 0).any():
        raise ConfigurationError("interface facet references a cell outside a submesh")
    acc.add_blocks(dofs, blocks)
    return acc


def _ghost_face_matrix(sigma, axis: int, h: float, gamma_g: float):
    """12x12 gradient-jump penalty matrix of one face, shared by all faces
    with the given normal axis (regular mesh).

    Union DOF order: the 8 vertices of the lower cell followed by the 4
    vertices exclusive to the upper cell.
    """
    from ..geometry.quadrature import reference_square_rule

    pts2, w2 = reference_square_rule(2)
    q = len(w2)
    other = [a for a in range(3) if a != axis]
    ref_lo = np.zeros((q, 3))
    ref_hi = np.zeros((q, 3))
    ref_lo[:, axis] = 1.0
    ref_hi[:, axis] = 0.0
    for k, a in enumerate(other):
        ref_lo[:, a] = pts2[:, k]
        ref_hi[:, a] = pts2[:, k]
    g_lo = shape_gradients(ref_lo)  # (Q,8,3) reference units
    g_hi = shape_gradients(ref_hi)

    sig = np.asarray(sigma, dtype=float)
    col = sig[:, axis]
    t_lo = np.einsum("i,qai->qa", col, g_lo)   # (sigma n).grad, trial side
    t_hi = np.einsum("i,qai->qa", col, g_hi)
    r_lo = g_lo[:, :, axis]                    # n.grad, test side
    r_hi = g_hi[:, :, axis]

    # map upper-cell locals into the union slots
    stride = 1 << axis
    shared = np.flatnonzero(VERTEX_OFFSETS[:, axis] == 0)  # hi locals shared with lo
    hi_only = np.flatnonzero(VERTEX_OFFSETS[:, axis] == 1)
    hi_map = np.empty(8, dtype=int)
    hi_map[shared] = shared + stride       # same vertex as lo local l+stride
    hi_map[hi_only] = 8 + np.arange(4)

    jt = np.zeros((q, 12))
    jr = np.zeros((q, 12))
    jt[:, :8] += t_lo
    jr[:, :8] += r_lo
    np.add.at(jt, (slice(None), hi_map), -t_hi)
    np.add.at(jr, (slice(None), hi_map), -r_hi)
    # scale: jumps carry 1/h each, dS = h^2, integrand weight h_hat = h
    m = gamma_g * h * np.einsum("q,qa,qb->ab", w2, jr, jt)
    return m, hi_map


def assemble_ghost(space: TrialSpace, partition: CutCellPartition,
                   model: CompartmentModel, gamma_g: float,
                   acc: MatrixAccumulator | None = None) -> MatrixAccumulator:
    """Ghost penalty over full faces of cut cells.

    A face contributes once per compartment whose submesh contains both
    neighbouring cells.
    """
    if gamma_g < 0.0:
        raise ConfigurationError(f"ghost penalty gamma_G must be >= 0, got {gamma_g}")
    if acc is None:
        acc = MatrixAccumulator(space.n_dofs)
    if gamma_g == 0.0 or not len(partition.ghost_cell):
        return acc
    mesh = space.mesh
    strides = np.array([1, mesh.dims[0], mesh.dims[0] * mesh.dims[1]], dtype=np.int64)
    for axis in range(3):
        faces = partition.ghost_cell[partition.ghost_axis == axis]
        if not len(faces):
            continue
        hi_cells = faces + strides[axis]
        for slot, comp in enumerate(model):
            active = space.in_submesh(slot, faces) & space.in_submesh(slot, hi_cells)
            if not active.any():
                continue
            m, hi_map = _ghost_face_matrix(comp.conductivity, axis, mesh.h, gamma_g)
            lo = faces[active]
            dofs_lo = space.cell_dofs(slot, lo)             # (G,8)
            dofs_hi = space.cell_dofs(slot, lo + strides[axis])
            dofs = np.concatenate([dofs_lo, dofs_hi[:, VERTEX_OFFSETS[:, axis] == 1]],
                                  axis=1)                   # (G,12)
            blocks = np.broadcast_to(m, (len(lo), 12, 12))
            acc.add_blocks(dofs, blocks)
    return acc


def assemble_load(space: TrialSpace, partition: CutCellPartition,
                  monopoles, slot: int) -> np.ndarray:
    """Load vector of a list of (point, charge) monopoles carried by the
    trial functions of one compartment."""
    pts = np.asarray([m[0] for m in monopoles], dtype=float)
    q = np.asarray([m[1] for m in monopoles], dtype=float)
    if pts.ndim != 2 or not len(pts):
        raise SourceError("need at least one monopole")
    mesh = space.mesh
    cells = np.atleast_1d(mesh.locate(pts))
    ok = space.in_submesh(slot, cells)
    if not ok.all():
        bad = pts[~ok][0]
        raise SourceError(
            f"monopole at {tuple(bad)} lies outside the snippets of "
            f"compartment slot {slot}")
    ref = (pts - mesh.cell_origin(cells)) / mesh.h
    phi = shape_values(ref)
    dofs = space.cell_dofs(slot, cells)
    load = np.zeros(space.n_dofs)
    np.add.at(load, dofs, q[:, None] * phi)
    return load


@dataclass
class SparseSystem:
    """Assembled stiffness matrix with its penalty configuration."""

    matrix: sp.csr_matrix
    variant: str
    gamma: float
    gamma_g: float
    stats: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def nullspace_residual(self) -> float:
        """|K 1|_inf / |K|_inf; small for a pure Neumann operator."""
        k1 = np.abs(self.matrix @ np.ones(self.n)).max()
        return float(k1 / np.abs(self.matrix).max())

    def dump_coo(self, path) -> None:
        """Write 'row col value' per line (debug format)."""
        coo = self.matrix.tocoo()
        with open(path, "w") as fh:
            for r, c, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{r} {c} {v:.17g}\n")


def assemble_system(space: TrialSpace, partition: CutCellPartition,
                    model: CompartmentModel, gamma: float = 16.0,
                    gamma_g: float = 0.1, variant: str = "nwipg",
                    volume_order: int = 2, facet_order: int = 2) -> SparseSystem:
    """Assemble volume + Nitsche + ghost contributions into one matrix."""
    acc = MatrixAccumulator(space.n_dofs)
    assemble_volume(space, partition, model, order=volume_order, acc=acc)
    assemble_nitsche(space, partition, model, gamma, variant=variant,
                     order=facet_order, acc=acc)
    assemble_ghost(space, partition, model, gamma_g, acc=acc)
    mat = acc.tocsr()
    stats = {
        "n_dofs": space.n_dofs,
        "nnz": int(mat.nnz),
        "n_cut_cells": int(len(partition.cut_cells)),
        "n_snippets": int(len(partition.snip_vol)),
        "n_facets": int(len(partition.facet_area)),
        "n_ghost_faces": int(len(partition.ghost_cell)),
    }
    log.info("assembled system: %s", stats)
    return SparseSystem(matrix=mat, variant=variant, gamma=gamma,
                        gamma_g=gamma_g, stats=stats)
