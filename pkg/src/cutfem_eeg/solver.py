"""Preconditioned iterative solvers and the electrode transfer matrix.

The assembled operator is a pure-Neumann stiffness matrix whose null
space is the global constant; loads must therefore have (numerically)
zero sum and solutions are gauge-fixed to zero mean.  Symmetric systems
(swipg) are solved with preconditioned conjugate gradients, the mildly
non-symmetric nwipg systems with BiCGstab.  Jacobi preconditioning is
the default; a symmetric Gauss-Seidel sweep is available as an option.

Lead fields are computed through the transfer-matrix approach: one
adjoint solve K^T t = r_e - r_ref per non-reference electrode, after
which every source costs a sparse dot product instead of a full solve.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import multiprocessing as mp
import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

from .errors import ConfigurationError, GeometryError, SolverError
from .fem.assembly import SparseSystem
from .fem.basis import shape_values
from .fem.space import TrialSpace
from .geometry.cutting import CutCellPartition

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 20000


def jacobi_preconditioner(matrix: sp.csr_matrix):
    d = matrix.diagonal().copy()
    bad = d <= 0.0
    if bad.any():
        log.warning("%d non-positive diagonal entries, patched for Jacobi", bad.sum())
        d[bad] = 1.0
    inv = 1.0 / d
    return lambda r: inv * r


def ssor_preconditioner(matrix: sp.csr_matrix):
    """One symmetric Gauss-Seidel sweep: (D+L) D^-1 (D+U) z = r."""
    lower = sp.tril(matrix, format="csr")
    upper = sp.triu(matrix, format="csr")
    d = matrix.diagonal().copy()
    d[d <= 0.0] = 1.0

    def apply(r):
        z = spsolve_triangular(lower, r, lower=True)
        z *= d
        return spsolve_triangular(upper, z, lower=False)

    return apply


def make_preconditioner(matrix: sp.csr_matrix, kind: str = "jacobi"):
    if kind == "jacobi":
        return jacobi_preconditioner(matrix)
    if kind in ("ssor", "gauss-seidel"):
        return ssor_preconditioner(matrix)
    if kind in ("none", ""):
        return lambda r: r
    raise ConfigurationError(f"unknown preconditioner {kind!r}")


def pcg(matrix, b, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, precond=None, x0=None):
    """Preconditioned conjugate gradients; returns (x, residual_history)."""
    if precond is None:
        precond = jacobi_preconditioner(matrix)
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return np.zeros_like(b), []
    x = np.zeros_like(b) if x0 is None else x0.astype(float).copy()
    r = b - matrix @ x if x0 is not None else b.copy()
    z = precond(r)
    p = z.copy()
    rz = float(r @ z)
    history = []
    for _ in range(max_iter):
        kp = matrix @ p
        alpha = rz / float(p @ kp)
        x += alpha * p
        r -= alpha * kp
        res = np.linalg.norm(r) / nb
        history.append(res)
        if res <= tol:
            return x, history
        z = precond(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(
        f"CG did not reach {tol:g} within {max_iter} iterations "
        f"(final residual {history[-1]:.3e})", residuals=history)


def bicgstab(matrix, b, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, precond=None,
             x0=None):
    """Preconditioned BiCGstab; returns (x, residual_history).

    The recursive residual of BiCGstab can stagnate slightly above the
    target; on stagnation (or breakdown of the recurrence) the iteration
    restarts from the current iterate with a fresh shadow residual, and
    convergence is confirmed against the true residual b - Kx.
    """
    if precond is None:
        precond = jacobi_preconditioner(matrix)
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return np.zeros_like(b), []
    x = np.zeros_like(b) if x0 is None else np.asarray(x0, dtype=float).copy()
    history = []

    def true_converged():
        return np.linalg.norm(b - matrix @ x) / nb <= tol

    restart = True
    stall_best = np.inf
    stall_count = 0
    while len(history) < max_iter:
        if restart:
            r = b - matrix @ x
            res = np.linalg.norm(r) / nb
            if res <= tol:
                return x, history
            r0 = r.copy()
            rho = alpha = omega = 1.0
            v = np.zeros_like(b)
            p = np.zeros_like(b)
            stall_best = res
            stall_count = 0
            restart = False
        rho_new = float(r0 @ r)
        if rho_new == 0.0 or omega == 0.0:
            restart = True
            if true_converged():
                return x, history
            continue
        beta = (rho_new / rho) * (alpha / omega)
        p = r + beta * (p - omega * v)
        ph = precond(p)
        v = matrix @ ph
        r0v = float(r0 @ v)
        if r0v == 0.0:
            restart = True
            continue
        alpha = rho_new / r0v
        s = r - alpha * v
        res = np.linalg.norm(s) / nb
        if res <= tol:
            x += alpha * ph
            history.append(res)
            if true_converged():
                return x, history
            restart = True
            continue
        sh = precond(s)
        t = matrix @ sh
        tt = float(t @ t)
        omega = float(t @ s) / tt if tt > 0.0 else 0.0
        x += alpha * ph + omega * sh
        r = s - omega * t
        res = np.linalg.norm(r) / nb
        history.append(res)
        if res <= tol:
            if true_converged():
                return x, history
            restart = True
            continue
        rho = rho_new
        # stagnation guard: no 1% progress over 60 iterations
        if res < 0.99 * stall_best:
            stall_best = res
            stall_count = 0
        else:
            stall_count += 1
            if stall_count >= 60:
                restart = True
    raise SolverError(
        f"BiCGstab did not reach {tol:g} within {max_iter} iterations "
        f"(final residual {history[-1]:.3e})", residuals=history)


def solve(system: SparseSystem, load, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
          preconditioner="jacobi", matrix=None, precond=None):
    """Solve the assembled pure-Neumann system for one load.

    The load must be compatible (zero sum within 1e-10 * |load|_1); it is
    mean-corrected before solving and the solution is returned with zero
    mean (gauge fixing).  Returns (x, residual_history).
    """
    b = np.asarray(load, dtype=float)
    l1 = np.abs(b).sum()
    if l1 == 0.0:
        return np.zeros_like(b), []
    if abs(b.sum()) > 1e-10 * l1:
        raise SolverError(
            f"incompatible load: sum {b.sum():.3e} exceeds 1e-10 * |f|_1 = {1e-10 * l1:.3e}")
    b = b - b.sum() / len(b)
    mat = system.matrix if matrix is None else matrix
    if precond is None:
        precond = make_preconditioner(mat, preconditioner)
    method = pcg if system.variant == "swipg" else bicgstab
    x, history = method(mat, b, tol=tol, max_iter=max_iter, precond=precond)
    x -= x.mean()
    return x, history


@dataclass
class ElectrodeSet:
    """Electrode positions with their DOF restriction operator."""

    positions: np.ndarray           # (E,3) as given
    snapped: np.ndarray             # (E,3) used for interpolation
    restriction: sp.csr_matrix      # (E,N), rows sum to 1
    snap_distance: np.ndarray       # (E,)

    @property
    def n_electrodes(self) -> int:
        return len(self.positions)


def electrode_restriction(space: TrialSpace, partition: CutCellPartition,
                          positions, snap_factor: float = 2.0) -> ElectrodeSet:
    """Trilinear restriction of the outermost compartment's potential to
    electrode positions.

    Positions are snapped onto the outermost level-set surface when they
    do not already lie in the outermost compartment; snapping farther
    than ``snap_factor * h`` is an error.
    """
    pts = np.atleast_2d(np.asarray(positions, dtype=float)).copy()
    mesh = space.mesh
    model = partition.model
    h = mesh.h
    out_slot = len(model) - 1
    ls = model[out_slot].level_set
    snapped = pts.copy()
    vals = np.atleast_1d(ls(pts))
    classif = model.classify_points(pts)
    need = np.atleast_1d(classif) != out_slot
    idx = np.flatnonzero(need)
    if len(idx):
        p = snapped[idx]
        for _ in range(30):
            v = np.atleast_1d(ls(p))
            if np.all(np.abs(v) <= 1e-12 * h):
                break
            g = ls.gradient(p)
            gn = np.einsum("ei,ei->e", g, g)
            gn[gn == 0.0] = 1.0
            p -= (v / gn)[:, None] * g
        snapped[idx] = p
    dist = np.linalg.norm(snapped - pts, axis=1)
    if np.any(dist > snap_factor * h):
        bad = pts[dist.argmax()]
        raise GeometryError(
            f"electrode at {tuple(bad)} is {dist.max():.3g} away from the "
            f"outermost compartment (limit {snap_factor * h:.3g})")
    if len(idx):
        log.info("snapped %d electrodes, max distance %.3g", len(idx), dist.max())

    # make sure every snapped point sits in a cell of the outer submesh
    rows, cols, weights = [], [], []
    for e, p in enumerate(snapped):
        q = p.copy()
        placed = False
        for nudge in (0.0, 1e-6, 1e-3, 1e-2, 5e-2, 2e-1):
            if nudge > 0.0:
                g = ls.gradient(q[None])[0]
                gg = np.linalg.norm(g)
                q = p - (nudge * h) * (g / gg if gg else 0.0)
            cell = mesh.locate(q)
            if space.in_submesh(out_slot, [cell])[0]:
                placed = True
                break
        if not placed:
            raise GeometryError(
                f"electrode at {tuple(pts[e])} could not be attached to the "
                "outermost compartment")
        ref = (q - mesh.cell_origin(cell)) / h
        w = shape_values(ref)
        dofs = space.cell_dofs(out_slot, [cell])[0]
        rows.extend([e] * 8)
        cols.extend(dofs.tolist())
        weights.extend(w.tolist())
        snapped[e] = q
    restriction = sp.csr_matrix(
        (weights, (rows, cols)), shape=(len(snapped), space.n_dofs))
    restriction.sum_duplicates()
    return ElectrodeSet(positions=pts, snapped=snapped, restriction=restriction,
                        snap_distance=dist)


@dataclass
class TransferMatrix:
    """Adjoint electrode solves: row e solves K^T t = r_e - r_ref."""

    rows: np.ndarray                # (E-1, N)
    reference: int                  # reference electrode index
    n_electrodes: int
    achieved_tol: np.ndarray        # (E-1,)
    iterations: np.ndarray          # (E-1,)

    def apply(self, load) -> np.ndarray:
        """Electrode potentials of one load (reference entry 0)."""
        f = np.asarray(load, dtype=float)
        if f.shape != (self.rows.shape[1],):
            raise ConfigurationError(
                f"load length {f.shape} does not match transfer matrix "
                f"({self.rows.shape[1]} dofs)")
        pot = np.empty(self.n_electrodes)
        vals = self.rows @ f
        pot[:self.reference] = vals[:self.reference]
        pot[self.reference] = 0.0
        pot[self.reference + 1:] = vals[self.reference:]
        return pot


_POOL_STATE = {}


def _solve_chunk(mat, rhs, lo, hi, tol, max_iter, symmetric, precond, warm_start):
    """Solve rows lo..hi sequentially, warm-starting each solve from the
    previous row's solution (neighbouring electrodes give similar rows)."""
    out = []
    method = pcg if symmetric else bicgstab
    x0 = None
    for k in range(lo, hi):
        x, hist = method(mat, rhs[k], tol=tol, max_iter=max_iter, precond=precond,
                         x0=x0 if warm_start else None)
        x0 = x
        out.append((x - x.mean(), hist[-1] if hist else 0.0, len(hist)))
    return out


def _transfer_worker(args):
    lo, hi = args
    st = _POOL_STATE
    precond = make_preconditioner(st["matrix"], st["preconditioner"])
    try:
        out = _solve_chunk(st["matrix"], st["rhs"], lo, hi, st["tol"],
                           st["max_iter"], st["symmetric"], precond,
                           st["warm_start"])
    except SolverError as err:
        return ("error", lo, str(err))
    return ("ok", lo, out)


def transfer_matrix(system: SparseSystem, electrodes: ElectrodeSet,
                    tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                    reference: int = 0, preconditioner: str = "jacobi",
                    workers: int = 1, warm_start: bool = True) -> TransferMatrix:
    """Solve K^T t = r_e - r_ref for every non-reference electrode.

    Rows are independent; with ``workers`` > 1 they are solved in
    parallel worker processes.  Within a chunk each solve warm-starts
    from the previous row, which is effective because neighbouring
    electrodes have similar adjoint solutions.
    """
    r = electrodes.restriction
    n_e = electrodes.n_electrodes
    if not 0 <= reference < n_e:
        raise ConfigurationError(f"reference electrode {reference} out of range")
    mat = system.matrix if system.variant == "swipg" else system.matrix.T.tocsr()
    others = np.array([e for e in range(n_e) if e != reference])
    if warm_start and len(others) > 2:
        # chain solves along a short path through the electrode positions so
        # each warm start comes from a nearby electrode
        others = others[_greedy_path(electrodes.snapped[others])]
    rhs = r[others].toarray() - r[[reference]].toarray()
    rows = np.empty((len(others), system.n))
    achieved = np.empty(len(others))
    iters = np.zeros(len(others), dtype=int)

    if workers <= 1:
        precond = make_preconditioner(mat, preconditioner)
        try:
            out = _solve_chunk(mat, rhs, 0, len(others), tol, max_iter,
                               system.variant == "swipg", precond, warm_start)
        except SolverError as err:
            raise SolverError(f"transfer solve failed: {err}",
                              residuals=err.residuals) from err
        for k, (x, res, nit) in enumerate(out):
            rows[k] = x
            achieved[k] = res
            iters[k] = nit
    else:
        _POOL_STATE.update(matrix=mat, rhs=rhs, tol=tol, max_iter=max_iter,
                           symmetric=system.variant == "swipg",
                           preconditioner=preconditioner, warm_start=warm_start)
        chunk = max(1, (len(others) + workers - 1) // workers)
        tasks = [(lo, min(lo + chunk, len(others)))
                 for lo in range(0, len(others), chunk)]
        ctx = mp.get_context("fork")
        try:
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                for status, lo, payload in pool.map(_transfer_worker, tasks):
                    if status == "error":
                        raise SolverError(
                            f"transfer solve failed for electrode {others[lo]}: {payload}")
                    for off, (x, res, nit) in enumerate(payload):
                        rows[lo + off] = x
                        achieved[lo + off] = res
                        iters[lo + off] = nit
        finally:
            _POOL_STATE.clear()
    order = np.argsort(others, kind="stable")
    rows, achieved, iters = rows[order], achieved[order], iters[order]
    log.info("transfer matrix: %d rows, iterations median %d max %d",
             len(others), int(np.median(iters)) if len(iters) else 0,
             int(iters.max()) if len(iters) else 0)
    return TransferMatrix(rows=rows, reference=reference, n_electrodes=n_e,
                          achieved_tol=achieved, iterations=iters)


def _greedy_path(points: np.ndarray) -> np.ndarray:
    """Index order visiting all points via greedy nearest neighbour."""
    n = len(points)
    left = np.arange(n)
    path = np.empty(n, dtype=np.int64)
    cur = 0
    for k in range(n):
        path[k] = left[cur]
        left = np.delete(left, cur)
        if not len(left):
            break
        d = np.linalg.norm(points[left] - points[path[k]], axis=1)
        cur = int(d.argmin())
    return path


def apply_transfer(transfer: TransferMatrix, load) -> np.ndarray:
    """Electrode potentials (length = electrodes, reference entry 0)."""
    return transfer.apply(load)


def lead_field_direct(system: SparseSystem, electrodes: ElectrodeSet, loads,
                      tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                      reference: int = 0,
                      preconditioner: str = "jacobi") -> np.ndarray:
    """Reference oracle: one full solve per load, then electrode restriction.

    Returns (E, n_loads) referenced potentials (reference electrode row 0).
    """
    precond = make_preconditioner(system.matrix, preconditioner)
    out = np.empty((electrodes.n_electrodes, len(loads)))
    for k, f in enumerate(loads):
        x, _ = solve(system, f, tol=tol, max_iter=max_iter, precond=precond)
        pot = electrodes.restriction @ x
        out[:, k] = pot - pot[reference]
    return out


def fibonacci_sphere(n: int, center=(0.0, 0.0, 0.0), radius: float = 1.0) -> np.ndarray:
    """n points approximately evenly spread on a sphere (golden spiral)."""
    k = np.arange(n, dtype=float)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    z = 1.0 - (2.0 * k + 1.0) / n
    rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    pts = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    return np.asarray(center, dtype=float) + radius * pts


def write_transfer(path, transfer: TransferMatrix, extra_header: str | None = None):
    """Persist a transfer matrix: 'TRANSFER e N ref' + float64 rows."""
    with open(path, "wb") as fh:
        fh.write(f"TRANSFER {transfer.n_electrodes} {transfer.rows.shape[1]} "
                 f"{transfer.reference}\n".encode("ascii"))
        if extra_header:
            fh.write((extra_header.rstrip("\n") + "\n").encode("ascii"))
        fh.write(transfer.rows.astype("<f8").tobytes())


def read_transfer(path) -> TransferMatrix:
    with open(path, "rb") as fh:
        head = fh.readline().decode("ascii").split()
        if len(head) != 4 or head[0] != "TRANSFER":
            raise ConfigurationError(f"{path}: not a TRANSFER file")
        n_e, n, ref = int(head[1]), int(head[2]), int(head[3])
        pos = fh.tell()
        second = fh.readline()
        if not second.startswith(b"CONFIG"):
            fh.seek(pos)
        raw = fh.read(8 * (n_e - 1) * n)
    rows = np.frombuffer(raw, dtype="<f8").reshape(n_e - 1, n).copy()
    return TransferMatrix(rows=rows, reference=ref, n_electrodes=n_e,
                          achieved_tol=np.zeros(n_e - 1),
                          iterations=np.zeros(n_e - 1, dtype=int))
