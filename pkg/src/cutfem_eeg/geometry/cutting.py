"""Cell classification and cut-cell decomposition.

Cut cells are decomposed into single-compartment tetrahedral snippets:
each hexahedral cell is split into 6 Kuhn tetrahedra which are cut by the
level sets in model order (each level set cuts the pieces left over by
the previous ones, so a cell crossed by several surfaces is handled by
recursion).  Mixed tetrahedra are cut by the sign of the level set at
their vertices, with edge intersection points located by bisection.
``refine`` extra passes subdivide mixed tetrahedra 1:8 before the final
cut, which tightens the piecewise-planar approximation of curved
interfaces.

Interface triangles are emitted oriented along the cutting level set's
gradient, i.e. from the inner compartment towards its neighbour.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, GeometryError
from .levelset import LevelSetField
from .mesh import EXTERIOR, BackgroundMesh, CompartmentModel
from .quadrature import simplex_volume, triangle_area

log = logging.getLogger(__name__)

CUT = -2

# Kuhn decomposition of the unit cube into 6 tetrahedra sharing the main
# diagonal; local vertex order is x-fastest (l = dx + 2*dy + 4*dz).
KUHN_TETS = np.array([
    (0, 1, 3, 7),
    (0, 1, 5, 7),
    (0, 2, 3, 7),
    (0, 2, 6, 7),
    (0, 4, 5, 7),
    (0, 4, 6, 7),
])

_CUBE_OFFSETS = np.array(
    [[dx, dy, dz] for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)], dtype=float)

_TET_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])

_BISECT_ITERS = 38  # 2^-38 * sqrt(3) < 1e-10, positions resolved to 1e-10*h


def _eval(level_set: LevelSetField, pts: np.ndarray) -> np.ndarray:
    flat = level_set(pts.reshape(-1, 3))
    return np.asarray(flat).reshape(pts.shape[:-1])


def classify_cells(mesh: BackgroundMesh, model: CompartmentModel,
                   sample_refine: int = 1) -> np.ndarray:
    """Classify every cell as interior(slot), CUT or EXTERIOR.

    Cells are sampled on a dyadic lattice of (2**sample_refine + 1)^3
    points; a cell is cut when the point-wise compartment assignment
    (first listed compartment with a negative level set) is not uniform
    across its samples.  Zero-crossings of a level set inside a region
    already claimed by an earlier compartment therefore do not cut.
    """
    if not 0 <= sample_refine <= 3:
        raise ConfigurationError("sample_refine must be in 0..3")
    f = 1 << sample_refine
    nx, ny, nz = mesh.dims
    gx, gy, gz = f * nx + 1, f * ny + 1, f * nz + 1
    step = mesh.h / f
    ax = np.asarray(mesh.origin)[0] + step * np.arange(gx)
    ay = np.asarray(mesh.origin)[1] + step * np.arange(gy)
    az = np.asarray(mesh.origin)[2] + step * np.arange(gz)
    pts = np.stack(np.meshgrid(ax, ay, az, indexing="ij"), axis=-1).reshape(-1, 3)

    slots = np.full(len(pts), EXTERIOR, dtype=np.int16)
    undecided = np.ones(len(pts), dtype=bool)
    for slot, comp in enumerate(model):
        if not undecided.any():
            break
        vals = comp.level_set(pts[undecided])
        inside = vals <= 0.0
        idx = np.flatnonzero(undecided)[inside]
        slots[idx] = slot
        undecided[idx] = False
    grid = slots.reshape(gx, gy, gz)

    first = None
    uniform = None
    for a in range(f + 1):
        for b in range(f + 1):
            for c in range(f + 1):
                view = grid[a::f, b::f, c::f][:nx, :ny, :nz]
                if first is None:
                    first = view
                    uniform = np.ones(view.shape, dtype=bool)
                else:
                    uniform &= view == first
    out = np.where(uniform, first, np.int16(CUT)).astype(np.int32)
    # linear cell index is x-fastest; meshgrid above is x-slowest
    return out.transpose(2, 1, 0).ravel()


def classify_cell(mesh: BackgroundMesh, cell_index: int, model: CompartmentModel,
                  sample_refine: int = 1) -> int:
    """Classification of a single cell: slot >= 0, CUT or EXTERIOR."""
    f = 1 << sample_refine
    o = mesh.cell_origin(cell_index)
    step = mesh.h / f
    r = np.arange(f + 1) * step
    pts = o + np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    ids = model.classify_points(pts)
    return int(ids[0]) if np.all(ids == ids[0]) else CUT


def _kuhn_tets(mesh: BackgroundMesh, cells: np.ndarray):
    """Seed tetrahedra of the given cells: verts (6C,4,3), owner (6C,)."""
    corners = mesh.cell_origin(cells)[:, None, :] + mesh.h * _CUBE_OFFSETS[None]
    verts = corners[:, KUHN_TETS, :].reshape(-1, 4, 3)
    owner = np.repeat(cells, len(KUHN_TETS))
    return verts, owner


def _subdivide8(verts: np.ndarray) -> np.ndarray:
    """Regular 1:8 refinement of tetrahedra (M,4,3) -> (8M,4,3)."""
    v = verts
    m = {(a, b): 0.5 * (v[:, a] + v[:, b]) for a, b in map(tuple, _TET_EDGES)}
    m01, m02, m03 = m[(0, 1)], m[(0, 2)], m[(0, 3)]
    m12, m13, m23 = m[(1, 2)], m[(1, 3)], m[(2, 3)]
    tets = [
        (v[:, 0], m01, m02, m03),
        (v[:, 1], m01, m12, m13),
        (v[:, 2], m02, m12, m23),
        (v[:, 3], m03, m13, m23),
        (m01, m23, m02, m03),
        (m01, m23, m03, m13),
        (m01, m23, m13, m12),
        (m01, m23, m12, m02),
    ]
    out = np.stack([np.stack(t, axis=1) for t in tets], axis=1)
    return out.reshape(-1, 4, 3)


def _bisect(level_set: LevelSetField, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero crossings on segments with level_set(a) < 0 <= level_set(b)."""
    lo, hi = a.copy(), b.copy()
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        fm = _eval(level_set, mid)
        neg = (fm < 0.0) | (fm == 0.0)
        lo = np.where(neg[:, None], mid, lo)
        hi = np.where(neg[:, None], hi, mid)
    return 0.5 * (lo + hi)


# Canonical vertex permutations per sign code (bit v set = vertex v inside).
_ONE_IN = {1: (0, 1, 2, 3), 2: (1, 0, 2, 3), 4: (2, 0, 1, 3), 8: (3, 0, 1, 2)}
_THREE_IN = {14: (0, 1, 2, 3), 13: (1, 0, 2, 3), 11: (2, 0, 1, 3), 7: (3, 0, 1, 2)}
_TWO_IN = {3: (0, 1, 2, 3), 5: (0, 2, 1, 3), 9: (0, 3, 1, 2),
           6: (1, 2, 0, 3), 10: (1, 3, 0, 2), 12: (2, 3, 0, 1)}


def _staircase(p0, p1, p2, p3, p4, p5):
    """3-tet split of the prism (p0,p1,p2 | p3,p4,p5), p_i above p_{i+3}."""
    return [
        np.stack([p0, p1, p2, p3], axis=1),
        np.stack([p1, p2, p3, p4], axis=1),
        np.stack([p2, p3, p4, p5], axis=1),
    ]


def _marching_cut(verts, owner, vals, level_set, eps_vol):
    """Cut mixed tetrahedra; returns inside/outside pieces and triangles.

    ``eps_vol`` is the absolute volume below which a side of a cut is
    merged back into the other side (degenerate sliver guard).
    """
    neg = vals < 0.0
    code = (neg << np.arange(4)).sum(axis=1)

    ins_v, ins_o = [], []
    out_v, out_o = [], []
    tri_v, tri_o = [], []

    def emit(group_idx, inside_tets, outside_tets, tris):
        """Apply the sliver-merge rule per parent tet, then collect.

        Interface triangles are kept even for merged parents: when a cut
        degenerates (surface through tet vertices) the sliver volume
        vanishes but the facet is still the genuine interface there.
        """
        gv, go = verts[group_idx], owner[group_idx]
        vol_in = sum(simplex_volume(t) for t in inside_tets)
        vol_out = sum(simplex_volume(t) for t in outside_tets)
        tiny_in = vol_in < eps_vol
        tiny_out = vol_out < eps_vol
        if tiny_in.any():
            log.debug("merged %d sliver cuts into outside", int(tiny_in.sum()))
            out_v.append(gv[tiny_in])
            out_o.append(go[tiny_in])
        if tiny_out.any():
            log.debug("merged %d sliver cuts into inside", int(tiny_out.sum()))
            ins_v.append(gv[tiny_out])
            ins_o.append(go[tiny_out])
        keep = ~(tiny_in | tiny_out)
        for t in inside_tets:
            ins_v.append(t[keep])
            ins_o.append(go[keep])
        for t in outside_tets:
            out_v.append(t[keep])
            out_o.append(go[keep])
        for t in tris:
            tri_v.append(t)
            tri_o.append(go)

    for c, perm in _ONE_IN.items():
        idx = np.flatnonzero(code == c)
        if not len(idx):
            continue
        A, B, C, D = (verts[idx][:, p] for p in perm)
        pB = _bisect(level_set, A, B)
        pC = _bisect(level_set, A, C)
        pD = _bisect(level_set, A, D)
        inside = [np.stack([A, pB, pC, pD], axis=1)]
        outside = _staircase(pB, pC, pD, B, C, D)
        emit(idx, inside, outside, [np.stack([pB, pC, pD], axis=1)])

    for c, perm in _THREE_IN.items():
        idx = np.flatnonzero(code == c)
        if not len(idx):
            continue
        D, A, B, C = (verts[idx][:, p] for p in perm)  # D outside
        pA = _bisect(level_set, A, D)
        pB = _bisect(level_set, B, D)
        pC = _bisect(level_set, C, D)
        inside = _staircase(pA, pB, pC, A, B, C)
        outside = [np.stack([D, pA, pB, pC], axis=1)]
        emit(idx, inside, outside, [np.stack([pA, pB, pC], axis=1)])

    for c, perm in _TWO_IN.items():
        idx = np.flatnonzero(code == c)
        if not len(idx):
            continue
        A, B, C, D = (verts[idx][:, p] for p in perm)  # A,B inside
        pAC = _bisect(level_set, A, C)
        pAD = _bisect(level_set, A, D)
        pBC = _bisect(level_set, B, C)
        pBD = _bisect(level_set, B, D)
        inside = _staircase(A, pAC, pAD, B, pBC, pBD)
        outside = _staircase(C, pAC, pBC, D, pAD, pBD)
        tris = [np.stack([pAC, pAD, pBC], axis=1), np.stack([pAD, pBC, pBD], axis=1)]
        emit(idx, inside, outside, tris)

    def cat(parts, shape):
        return (np.concatenate(parts) if parts
                else np.empty(shape))

    return (cat(ins_v, (0, 4, 3)), cat(ins_o, (0,)).astype(np.int64),
            cat(out_v, (0, 4, 3)), cat(out_o, (0,)).astype(np.int64),
            cat(tri_v, (0, 3, 3)), cat(tri_o, (0,)).astype(np.int64))


def _cut_by_level_set(verts, owner, level_set, eps_vol, zero_shift):
    """Partition tetrahedra by one level set (no subdivision).

    Returns (inside verts/owner, outside verts/owner, triangles/owner).
    """
    if not len(verts):
        empty = np.empty((0, 4, 3))
        return (empty, owner, empty, owner, np.empty((0, 3, 3)),
                np.empty(0, dtype=np.int64))
    vals = _eval(level_set, verts)
    vals = np.where(vals == 0.0, -zero_shift, vals)
    n_in = (vals < 0.0).sum(axis=1)
    full_in = n_in == 4
    full_out = n_in == 0
    mixed = ~(full_in | full_out)
    iv, io, ov, oo, tv, to = _marching_cut(
        verts[mixed], owner[mixed], vals[mixed], level_set, eps_vol)
    return (np.concatenate([verts[full_in], iv]),
            np.concatenate([owner[full_in], io]),
            np.concatenate([verts[full_out], ov]),
            np.concatenate([owner[full_out], oo]),
            tv, to)


def _refine_mixed(verts, owner, level_sets, refine, zero_shift):
    """Subdivide 1:8, ``refine`` times, every tetrahedron whose vertex
    signs are mixed for at least one level set."""
    for _ in range(refine):
        if not len(verts):
            break
        mixed = np.zeros(len(verts), dtype=bool)
        still_out = np.ones(len(verts), dtype=bool)
        for ls in level_sets:
            vals = _eval(ls, verts)
            vals = np.where(vals == 0.0, -zero_shift, vals)
            n_in = (vals < 0.0).sum(axis=1)
            mixed |= still_out & (n_in > 0) & (n_in < 4)
            # tets fully inside an earlier compartment cannot be cut later
            still_out &= n_in == 0
        verts = np.concatenate([verts[~mixed], _subdivide8(verts[mixed])])
        owner = np.concatenate([owner[~mixed], np.repeat(owner[mixed], 8)])
    return verts, owner


@dataclass
class CutCellPartition:
    """Decomposition of all cut cells into snippets and interface facets.

    Snippets tagged ``EXTERIOR`` cover the part of a cut cell outside
    every compartment; they are kept so that snippet volumes of each cut
    cell sum to h^3 exactly, but carry no degrees of freedom.
    """

    mesh: BackgroundMesh
    model: CompartmentModel
    classification: np.ndarray  # (ncells,) slot | CUT | EXTERIOR
    snip_verts: np.ndarray      # (S,4,3)
    snip_owner: np.ndarray      # (S,) cell index
    snip_slot: np.ndarray       # (S,) compartment slot or EXTERIOR
    snip_vol: np.ndarray        # (S,)
    facet_verts: np.ndarray     # (F,3,3)
    facet_owner: np.ndarray     # (F,) cell index
    facet_pair: np.ndarray      # (F,2) slots (i, j), i < j
    facet_normal: np.ndarray    # (F,3) unit, from slot i towards j
    facet_area: np.ndarray      # (F,)
    ghost_cell: np.ndarray      # (G,) lower cell of each ghost face
    ghost_axis: np.ndarray      # (G,) face normal axis 0..2
    _cell_snippets: dict = field(default_factory=dict, repr=False)

    @property
    def cut_cells(self) -> np.ndarray:
        return np.flatnonzero(self.classification == CUT)

    def cells_of_slot(self, slot: int) -> np.ndarray:
        """Submesh of one compartment: interior cells plus cut cells with
        at least one snippet in the compartment (sorted).

        Cut cells owning an interface facet of the compartment are also
        included; this only adds cells in the degenerate case where the
        interface coincides with cell faces and the compartment's volume
        in the cell vanishes, and keeps the Nitsche terms assemblable.
        """
        interior = np.flatnonzero(self.classification == slot)
        cut = np.unique(self.snip_owner[self.snip_slot == slot])
        touched = np.unique(self.facet_owner[(self.facet_pair == slot).any(axis=1)])
        return np.union1d(np.union1d(interior, cut), touched)

    def snippet_rows_of_cell(self, cell: int) -> np.ndarray:
        if not self._cell_snippets:
            order = np.argsort(self.snip_owner, kind="stable")
            self._cell_snippets["order"] = order
            self._cell_snippets["sorted"] = self.snip_owner[order]
        order = self._cell_snippets["order"]
        srt = self._cell_snippets["sorted"]
        lo = np.searchsorted(srt, cell, side="left")
        hi = np.searchsorted(srt, cell, side="right")
        return order[lo:hi]

    def locate_slot(self, points) -> np.ndarray:
        """Compartment slot containing each point, resolved through the
        snippet decomposition for cut cells (EXTERIOR when outside)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        cells = np.atleast_1d(self.mesh.locate(pts))
        out = np.empty(len(pts), dtype=np.int32)
        for n, (p, c) in enumerate(zip(pts, cells)):
            cls = self.classification[c]
            if cls != CUT:
                out[n] = cls
                continue
            rows = self.snippet_rows_of_cell(int(c))
            out[n] = EXTERIOR
            best = -1e-9 * self.mesh.h
            for r in rows:
                lam = _barycentric(self.snip_verts[r], p)
                m = lam.min()
                if m > best:
                    best = m
                    out[n] = self.snip_slot[r]
        if np.asarray(points).ndim == 1:
            return int(out[0])
        return out

    def compartment_volumes(self) -> np.ndarray:
        """Total volume per compartment slot (interior cells + snippets)."""
        vols = np.zeros(len(self.model))
        cell_vol = self.mesh.h ** 3
        for slot in range(len(self.model)):
            vols[slot] = cell_vol * np.count_nonzero(self.classification == slot)
            vols[slot] += self.snip_vol[self.snip_slot == slot].sum()
        return vols


def _barycentric(tet, p):
    T = np.column_stack([tet[1] - tet[0], tet[2] - tet[0], tet[3] - tet[0]])
    try:
        lam = np.linalg.solve(T, p - tet[0])
    except np.linalg.LinAlgError:
        return np.full(4, -np.inf)
    return np.array([1.0 - lam.sum(), *lam])


def _ghost_faces(mesh: BackgroundMesh, cut_ids: np.ndarray):
    """Interior mesh faces of cut cells: (lower cell, axis) pairs."""
    if not len(cut_ids):
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    ijk = mesh.cell_ijk(cut_ids)
    dims = np.asarray(mesh.dims)
    keys = []
    for ax in range(3):
        e = np.zeros(3, dtype=int)
        e[ax] = 1
        up_ok = ijk[:, ax] + 1 < dims[ax]
        keys.append(np.stack([cut_ids[up_ok], np.full(up_ok.sum(), ax)], axis=1))
        lo_ok = ijk[:, ax] - 1 >= 0
        lower = mesh.cell_index(ijk[lo_ok] - e)
        keys.append(np.stack([lower, np.full(lo_ok.sum(), ax)], axis=1))
    allk = np.concatenate(keys)
    enc = allk[:, 0] * 3 + allk[:, 1]
    enc = np.unique(enc)
    return enc // 3, enc % 3


def build_partition(mesh: BackgroundMesh, model: CompartmentModel,
                    refine: int = 1, sample_refine: int = 1,
                    eps_v: float = 1e-12) -> CutCellPartition:
    """Classify all cells and decompose the cut ones.

    ``refine`` (0..3) extra subdivision passes are applied to mixed
    tetrahedra before cutting; ``eps_v`` scales the sliver-merge volume
    threshold eps_v * h^3.
    """
    if not 0 <= refine <= 3:
        raise ConfigurationError("refine must be in 0..3")
    classification = classify_cells(mesh, model, sample_refine)
    cut_ids = np.flatnonzero(classification == CUT)
    h = mesh.h
    eps_vol = eps_v * h ** 3
    zero_shift = 1e-30 + eps_v * h

    pend_v, pend_o = _kuhn_tets(mesh, cut_ids)
    pend_v, pend_o = _refine_mixed(pend_v, pend_o,
                                   [c.level_set for c in model], refine, zero_shift)
    snip_v, snip_o, snip_s = [], [], []
    fac_v, fac_o, fac_i = [], [], []
    for slot, comp in enumerate(model):
        if not len(pend_v):
            break
        iv, io, ov, oo, tv, to = _cut_by_level_set(
            pend_v, pend_o, comp.level_set, eps_vol, zero_shift)
        snip_v.append(iv)
        snip_o.append(io)
        snip_s.append(np.full(len(iv), slot, dtype=np.int32))
        fac_v.append(tv)
        fac_o.append(to)
        fac_i.append(np.full(len(tv), slot, dtype=np.int32))
        pend_v, pend_o = ov, oo
    # leftovers are outside every compartment
    snip_v.append(pend_v)
    snip_o.append(pend_o)
    snip_s.append(np.full(len(pend_v), EXTERIOR, dtype=np.int32))

    snip_verts = np.concatenate(snip_v)
    snip_owner = np.concatenate(snip_o)
    snip_slot = np.concatenate(snip_s)
    snip_vol = simplex_volume(snip_verts) if len(snip_verts) else np.empty(0)
    # drop exactly-degenerate slivers (zero contribution to any integral)
    keep = snip_vol > 1e-14 * h ** 3
    snip_verts, snip_owner = snip_verts[keep], snip_owner[keep]
    snip_slot, snip_vol = snip_slot[keep], snip_vol[keep]

    facet_verts = np.concatenate(fac_v) if fac_v else np.empty((0, 3, 3))
    facet_owner = (np.concatenate(fac_o) if fac_o else np.empty(0)).astype(np.int64)
    facet_in = np.concatenate(fac_i) if fac_i else np.empty(0, dtype=np.int32)
    area = triangle_area(facet_verts) if len(facet_verts) else np.empty(0)
    keep = area > 1e-14 * h ** 2
    facet_verts, facet_owner = facet_verts[keep], facet_owner[keep]
    facet_in, area = facet_in[keep], area[keep]

    normal, pair, keep = _orient_facets(model, facet_verts, facet_in, h)
    facet_verts, facet_owner = facet_verts[keep], facet_owner[keep]
    area = area[keep]

    ghost_cell, ghost_axis = _ghost_faces(mesh, cut_ids)
    return CutCellPartition(
        mesh=mesh, model=model, classification=classification,
        snip_verts=snip_verts, snip_owner=snip_owner,
        snip_slot=snip_slot, snip_vol=snip_vol,
        facet_verts=facet_verts, facet_owner=facet_owner, facet_pair=pair,
        facet_normal=normal, facet_area=area,
        ghost_cell=ghost_cell, ghost_axis=ghost_axis)


def _orient_facets(model, facet_verts, facet_in, h):
    """Orient facet normals along the cutting level set's gradient and
    resolve the outer compartment; facets facing the exterior are dropped
    (homogeneous Neumann boundary)."""
    n_f = len(facet_verts)
    if not n_f:
        return (np.empty((0, 3)), np.empty((0, 2), dtype=np.int32),
                np.empty(0, dtype=bool))
    e1 = facet_verts[:, 1] - facet_verts[:, 0]
    e2 = facet_verts[:, 2] - facet_verts[:, 0]
    normal = np.cross(e1, e2)
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    centroid = facet_verts.mean(axis=1)
    for slot in range(len(model)):
        sel = facet_in == slot
        if not sel.any():
            continue
        g = model[slot].level_set.gradient(centroid[sel])
        flip = np.einsum("fi,fi->f", normal[sel], g) < 0.0
        rows = np.flatnonzero(sel)[flip]
        normal[rows] *= -1.0
        facet_verts[rows] = facet_verts[rows][:, [0, 2, 1]]
    # outer compartment: first later level set negative just outside
    probe = centroid + (1e-3 * h) * normal
    outer = np.full(n_f, EXTERIOR, dtype=np.int32)
    undecided = np.ones(n_f, dtype=bool)
    for slot in range(len(model)):
        cand = undecided & (facet_in < slot)
        if not cand.any():
            continue
        vals = model[slot].level_set(probe[cand])
        inside = vals <= 0.0
        rows = np.flatnonzero(cand)[inside]
        outer[rows] = slot
        undecided[rows] = False
    keep = outer != EXTERIOR
    pair = np.stack([facet_in[keep], outer[keep]], axis=1).astype(np.int32)
    return normal[keep], pair, keep


def cut_cell(mesh: BackgroundMesh, cell_index: int, model: CompartmentModel,
             refine: int = 1, eps_v: float = 1e-12):
    """Decompose a single cut cell.

    Returns (snippets, facets) where snippets is a list of
    (vertices (4,3), slot) and facets a list of
    (vertices (3,3), unit normal, (slot_i, slot_j)).
    """
    if classify_cell(mesh, cell_index, model) != CUT:
        raise GeometryError(f"cell {cell_index} is not a cut cell")
    sub = _single_cell_partition(mesh, cell_index, model, refine, eps_v)
    snippets = [(sub.snip_verts[i], int(sub.snip_slot[i]))
                for i in range(len(sub.snip_verts))]
    facets = [(sub.facet_verts[i], sub.facet_normal[i],
               (int(sub.facet_pair[i, 0]), int(sub.facet_pair[i, 1])))
              for i in range(len(sub.facet_verts))]
    return snippets, facets


def _single_cell_partition(mesh, cell_index, model, refine, eps_v):
    h = mesh.h
    eps_vol = eps_v * h ** 3
    zero_shift = 1e-30 + eps_v * h
    pend_v, pend_o = _kuhn_tets(mesh, np.array([cell_index]))
    pend_v, pend_o = _refine_mixed(pend_v, pend_o,
                                   [c.level_set for c in model], refine, zero_shift)
    snip_v, snip_s, fac_v, fac_i = [], [], [], []
    for slot, comp in enumerate(model):
        if not len(pend_v):
            break
        iv, _io, ov, oo, tv, _to = _cut_by_level_set(
            pend_v, pend_o, comp.level_set, eps_vol, zero_shift)
        snip_v.append(iv)
        snip_s.append(np.full(len(iv), slot, dtype=np.int32))
        fac_v.append(tv)
        fac_i.append(np.full(len(tv), slot, dtype=np.int32))
        pend_v, pend_o = ov, oo
    snip_v.append(pend_v)
    snip_s.append(np.full(len(pend_v), EXTERIOR, dtype=np.int32))
    snip_verts = np.concatenate(snip_v)
    snip_slot = np.concatenate(snip_s)
    vol = simplex_volume(snip_verts) if len(snip_verts) else np.empty(0)
    keep = vol > 1e-14 * h ** 3
    facet_verts = np.concatenate(fac_v) if fac_v else np.empty((0, 3, 3))
    facet_in = np.concatenate(fac_i) if fac_i else np.empty(0, dtype=np.int32)
    area = triangle_area(facet_verts) if len(facet_verts) else np.empty(0)
    fkeep = area > 1e-14 * h ** 2
    facet_verts, facet_in, area = facet_verts[fkeep], facet_in[fkeep], area[fkeep]
    normal, pair, okeep = _orient_facets(model, facet_verts, facet_in, h)

    class _Sub:
        pass

    sub = _Sub()
    sub.snip_verts = snip_verts[keep]
    sub.snip_slot = snip_slot[keep]
    sub.snip_vol = vol[keep]
    sub.facet_verts = facet_verts[okeep]
    sub.facet_normal = normal
    sub.facet_pair = pair
    sub.facet_area = area[okeep]
    return sub


def build_submeshes(mesh: BackgroundMesh, model: CompartmentModel,
                    partition: CutCellPartition):
    """Per-compartment cell lists (sorted cell indices).

    Raises ConfigurationError when a declared compartment has no cells.
    """
    subs = []
    for slot, comp in enumerate(model):
        cells = partition.cells_of_slot(slot)
        if not len(cells):
            raise ConfigurationError(
                f"compartment {comp.compartment_id} ({comp.name or 'unnamed'}) "
                "has no cells in the background mesh")
        subs.append(cells)
    return subs
