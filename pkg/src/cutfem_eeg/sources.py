"""Dipole sources discretised as St. Venant monopole clusters.

A dipole is replaced by point charges placed at quadrature sites of the
source compartment's geometry around the dipole (snippet quadrature
points in cut cells, full-cell Gauss points in interior cells).  The
charges match the dipole's moments: total charge and first moments are
enforced exactly, higher moments enter a Tikhonov-regularised least
squares objective.  Monomials are scaled by the background cell size to
keep the moment system well conditioned.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import SourceError
from .geometry.cutting import CUT, CutCellPartition
from .geometry.mesh import EXTERIOR
from .geometry.quadrature import reference_box_rule, tet_rule

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dipole:
    """Current dipole: position and moment vector."""

    position: tuple
    moment: tuple

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(c) for c in self.position))
        object.__setattr__(self, "moment", tuple(float(c) for c in self.moment))


@dataclass(frozen=True)
class VenantConfig:
    """Venant discretisation parameters."""

    order: int = 2                 # highest matched monomial degree
    lam: float = 1e-6              # Tikhonov weight on the charges
    site_order: int = 2            # quadrature order generating the sites
    neighborhood: str = "face"     # "cell" or "face" (cell + face neighbours)

    def __post_init__(self):
        if self.order < 1:
            raise SourceError("venant order must be >= 1")
        if self.lam < 0.0:
            raise SourceError("venant lambda must be >= 0")
        if self.neighborhood not in ("cell", "face"):
            raise SourceError("neighborhood must be 'cell' or 'face'")


@dataclass
class MonopoleSet:
    """Venant charges; iterable as (point, charge) pairs."""

    points: np.ndarray   # (M,3)
    charges: np.ndarray  # (M,)

    def __iter__(self):
        return iter(zip(self.points, self.charges))

    def __len__(self):
        return len(self.charges)


def _neighborhood_cells(mesh, cell: int, cfg: VenantConfig) -> np.ndarray:
    cells = [cell]
    if cfg.neighborhood == "face":
        ijk = mesh.cell_ijk(cell)
        dims = np.asarray(mesh.dims)
        for ax in range(3):
            for d in (-1, 1):
                q = ijk.copy()
                q[ax] += d
                if 0 <= q[ax] < dims[ax]:
                    cells.append(int(mesh.cell_index(q)))
    return np.asarray(cells, dtype=np.int64)


def candidate_sites(partition: CutCellPartition, cell_list, slot: int,
                    site_order: int) -> np.ndarray:
    """Quadrature sites of the source compartment's region in the cells."""
    mesh = partition.mesh
    sites = []
    box_pts, _ = reference_box_rule(site_order)
    for cell in np.atleast_1d(cell_list):
        cls = partition.classification[cell]
        if cls == slot:
            orig = mesh.cell_origin(int(cell))
            sites.append(orig + mesh.h * box_pts)
        elif cls == CUT:
            rows = partition.snippet_rows_of_cell(int(cell))
            rows = rows[partition.snip_slot[rows] == slot]
            if len(rows):
                pts, _ = tet_rule(partition.snip_verts[rows], site_order)
                sites.append(pts.reshape(-1, 3))
    if not sites:
        return np.empty((0, 3))
    return np.concatenate(sites)


def _multi_indices(order: int):
    out = []
    for total in range(order + 1):
        for ax in range(total + 1):
            for ay in range(total - ax + 1):
                out.append((ax, ay, total - ax - ay))
    return out


def venant_monopoles(dipole: Dipole, partition: CutCellPartition, space,
                     slot: int, cfg: VenantConfig = VenantConfig()) -> MonopoleSet:
    """Monopole cluster approximating ``dipole`` inside compartment ``slot``.

    Total charge and the three first moments are matched exactly; higher
    moments (up to ``cfg.order``) are minimised together with the
    Tikhonov term lam*|q|^2.  Charges are linear in the dipole moment.
    """
    mesh = partition.mesh
    model = partition.model
    x0 = np.asarray(dipole.position, dtype=float)
    p = np.asarray(dipole.moment, dtype=float)
    if model.classify_points(x0) != slot:
        raise SourceError(
            f"dipole at {tuple(x0)} is not inside source compartment slot {slot}")
    cell = mesh.locate(x0)
    cells = _neighborhood_cells(mesh, int(cell), cfg)
    sites = candidate_sites(partition, cells, slot, cfg.site_order)
    if len(sites) >= 4:
        inside = model.classify_points(sites) == slot
        sites = sites[inside]
    if len(sites) < 4:
        raise SourceError(
            f"only {len(sites)} candidate sites near {tuple(x0)}; "
            "use a larger venant neighborhood")

    h = mesh.h
    u = (sites - x0) / h                      # (M,3) scaled offsets
    alphas = _multi_indices(cfg.order)
    m_rows = np.stack([
        (u[:, 0] ** ax) * (u[:, 1] ** ay) * (u[:, 2] ** az)
        for ax, ay, az in alphas])            # (R,M)
    hard = [k for k, a in enumerate(alphas) if sum(a) <= 1]
    soft = [k for k, a in enumerate(alphas) if sum(a) > 1]
    c = m_rows[hard]
    d = np.zeros(len(hard))
    for row, k in enumerate(hard):
        a = alphas[k]
        if sum(a) == 1:
            d[row] = p[a.index(1)] / h

    n_sites = len(sites)
    a_soft = m_rows[soft] if soft else np.zeros((0, n_sites))
    # KKT system of: min |A q|^2 + lam |q|^2  s.t.  C q = d
    lhs = np.zeros((n_sites + len(hard), n_sites + len(hard)))
    lhs[:n_sites, :n_sites] = a_soft.T @ a_soft + cfg.lam * np.eye(n_sites)
    lhs[:n_sites, n_sites:] = c.T
    lhs[n_sites:, :n_sites] = c
    rhs = np.concatenate([np.zeros(n_sites), d])
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as err:
        raise SourceError(
            "rank-deficient Venant moment system; use a larger neighborhood") from err
    q = sol[:n_sites]
    resid = np.abs(c @ q - d).max()
    scale = max(np.abs(d).max(), 1e-300)
    if resid > 1e-8 * scale:
        raise SourceError(
            "Venant moment constraints not met "
            f"(residual {resid:.2e}); use a larger neighborhood")
    return MonopoleSet(points=sites, charges=q)


@dataclass(frozen=True)
class SourcePoint:
    """Candidate source location with boundary metadata."""

    position: tuple
    eccentricity: float      # |x-c|/r for spherical compartments, else nan
    near_boundary: bool      # closer than one background h to the boundary


def source_grid(partition: CutCellPartition, spacing: float, slot: int):
    """Regular source grid restricted to one compartment.

    Grid points are anchored at the mesh origin; points whose containing
    snippet is not in the compartment are dropped.  Points closer than
    one background cell to the compartment boundary are flagged.
    """
    if spacing <= 0.0:
        raise SourceError("grid spacing must be positive")
    mesh = partition.mesh
    model = partition.model
    lo = np.asarray(mesh.origin)
    extent = np.asarray(mesh.dims) * mesh.h
    counts = np.floor(extent / spacing).astype(int) + 1
    axes = [lo[d] + spacing * np.arange(counts[d]) for d in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = pts[np.all(pts <= lo + extent + 1e-9 * mesh.h, axis=1)]
    if not len(pts):
        raise SourceError("grid spacing larger than the mesh extent")

    slots = partition.locate_slot(pts)
    pts = pts[slots == slot]
    if not len(pts):
        raise SourceError(f"no grid points inside compartment slot {slot}")

    ls = model[slot].level_set
    phi = np.atleast_1d(ls(pts))
    near = np.abs(phi) < mesh.h
    from .geometry.levelset import SphereLevelSet
    if isinstance(ls, SphereLevelSet):
        ecc = np.linalg.norm(pts - np.asarray(ls.center), axis=1) / ls.radius
    else:
        ecc = np.full(len(pts), np.nan)
    out = [SourcePoint(position=tuple(p), eccentricity=float(e), near_boundary=bool(nb))
           for p, e, nb in zip(pts, ecc, near)]
    log.info("source grid: %d points in slot %d (%d near boundary)",
             len(out), slot, int(near.sum()))
    return out


def read_sources(path, scale: float = 1.0, moment_scale: float = 1.0):
    """Read 'x y z [mx my mz]' per line; returns (positions, moments|None).

    Lines starting with '#' are skipped.  ``scale``/``moment_scale``
    convert file units into model units.
    """
    positions, moments = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            s = line.split("#")[0].strip()
            if not s:
                continue
            parts = s.split()
            if len(parts) not in (3, 6):
                raise SourceError(f"{path}:{ln}: expected 3 or 6 numbers")
            vals = [float(t) for t in parts]
            positions.append(vals[:3])
            moments.append(vals[3:] if len(vals) == 6 else None)
    if not positions:
        raise SourceError(f"{path}: no source lines")
    pos = np.asarray(positions) * scale
    have_m = [m for m in moments if m is not None]
    if have_m and len(have_m) != len(moments):
        raise SourceError(f"{path}: moments must be given for all or no lines")
    mom = np.asarray(have_m) * moment_scale if have_m else None
    return pos, mom


def write_sources(path, positions, moments=None, scale: float = 1.0,
                  moment_scale: float = 1.0, header: str | None = None):
    """Write positions (and moments) in the ASCII source format."""
    with open(path, "w") as fh:
        if header:
            for line in header.rstrip("\n").split("\n"):
                fh.write(f"# {line}\n")
        for k, p in enumerate(np.asarray(positions)):
            fh.write(" ".join(f"{v * scale:.17g}" for v in p))
            if moments is not None:
                fh.write(" " + " ".join(f"{v * moment_scale:.17g}"
                                        for v in np.asarray(moments)[k]))
            fh.write("\n")
