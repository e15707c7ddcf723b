"""Trilinear (Q1) basis on the reference cell [0,1]^3.

Local vertex order is x-fastest: l = dx + 2*dy + 4*dz, matching the
background mesh's ``cell_vertex_ids``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..geometry.quadrature import reference_box_rule

VERTEX_OFFSETS = np.array(
    [[dx, dy, dz] for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)], dtype=float)


def shape_values(ref_pts) -> np.ndarray:
    """phi_l at reference points (...,3) -> (...,8)."""
    p = np.asarray(ref_pts, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    out = np.empty(p.shape[:-1] + (8,))
    for l, (dx, dy, dz) in enumerate(VERTEX_OFFSETS):
        fx = x if dx else 1.0 - x
        fy = y if dy else 1.0 - y
        fz = z if dz else 1.0 - z
        out[..., l] = fx * fy * fz
    return out


def shape_gradients(ref_pts) -> np.ndarray:
    """Reference gradients at points (...,3) -> (...,8,3).

    Physical gradients on a cell of edge h are these divided by h.
    """
    p = np.asarray(ref_pts, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    out = np.empty(p.shape[:-1] + (8, 3))
    for l, (dx, dy, dz) in enumerate(VERTEX_OFFSETS):
        fx, gx = (x, 1.0) if dx else (1.0 - x, -1.0)
        fy, gy = (y, 1.0) if dy else (1.0 - y, -1.0)
        fz, gz = (z, 1.0) if dz else (1.0 - z, -1.0)
        out[..., l, 0] = gx * fy * fz
        out[..., l, 1] = fx * gy * fz
        out[..., l, 2] = fx * fy * gz
    return out


@lru_cache(maxsize=None)
def _box_rule_cached(order: int):
    return reference_box_rule(order)


def hex_stiffness(sigma, h: float) -> np.ndarray:
    """Exact 8x8 stiffness of one cubic cell: int sigma grad(phi_a).grad(phi_b).

    The integrand is at most quadratic per variable, so the order-2
    tensor Gauss rule is exact.
    """
    pts, w = _box_rule_cached(2)
    g = shape_gradients(pts)  # (Q,8,3) reference
    sig = np.asarray(sigma, dtype=float)
    if sig.shape == ():
        sig = float(sig) * np.eye(3)
    # physical grad = ref/h, physical volume element = h^3
    return float(h) * np.einsum("q,qai,ij,qbj->ab", w, g, sig, g)
