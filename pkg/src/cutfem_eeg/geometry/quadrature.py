"""Quadrature rules on simplices, boxes and their embedded facets.

Simplex rules are conical-product Gauss-Jacobi rules (Stroud): an
``m``-point-per-axis rule integrates polynomials of total degree
``2m - 1`` exactly, so a requested ``order`` is honoured by taking
``m = ceil((order + 1) / 2)``.  All weights are positive and sum to the
measure of the reference element.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

from ..errors import GeometryError

_MAX_ORDER = 50


def _points_per_axis(order: int) -> int:
    if not isinstance(order, (int, np.integer)) or order < 1 or order > _MAX_ORDER:
        raise GeometryError(f"unsupported quadrature order {order!r} (expected 1..{_MAX_ORDER})")
    return (int(order) + 2) // 2


def _jacobi01(m: int, alpha: int):
    """Nodes/weights for weight (1-x)^alpha on [0, 1]."""
    if alpha == 0:
        t, w = np.polynomial.legendre.leggauss(m)
    else:
        t, w = roots_jacobi(m, alpha, 0.0)
    return (1.0 + t) / 2.0, w / 2.0 ** (alpha + 1)


@lru_cache(maxsize=None)
def reference_tet_rule(order: int):
    """Rule on the unit tetrahedron {x,y,z >= 0, x+y+z <= 1}.

    Returns (points (Q,3), weights (Q,)); weights sum to 1/6.
    """
    m = _points_per_axis(order)
    x1, w1 = _jacobi01(m, 2)
    x2, w2 = _jacobi01(m, 1)
    x3, w3 = _jacobi01(m, 0)
    xi, eta, zeta = np.meshgrid(x1, x2, x3, indexing="ij")
    x = xi
    y = eta * (1.0 - xi)
    z = zeta * (1.0 - xi) * (1.0 - eta)
    w = (w1[:, None, None] * w2[None, :, None] * w3[None, None, :]).ravel()
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    return pts, w


@lru_cache(maxsize=None)
def reference_tri_rule(order: int):
    """Rule on the unit triangle {x,y >= 0, x+y <= 1}.

    Returns (points (Q,2), weights (Q,)); weights sum to 1/2.
    """
    m = _points_per_axis(order)
    x1, w1 = _jacobi01(m, 1)
    x2, w2 = _jacobi01(m, 0)
    xi, eta = np.meshgrid(x1, x2, indexing="ij")
    x = xi
    y = eta * (1.0 - xi)
    w = (w1[:, None] * w2[None, :]).ravel()
    return np.stack([x.ravel(), y.ravel()], axis=1), w


@lru_cache(maxsize=None)
def reference_gauss_1d(order: int):
    """Gauss-Legendre rule on [0, 1], exact to the requested order."""
    m = _points_per_axis(order)
    return _jacobi01(m, 0)


def tet_rule(vertices, order: int):
    """Quadrature for one or more tetrahedra.

    Parameters
    ----------
    vertices : array (4,3) or (T,4,3)
    order : requested polynomial exactness.

    Returns
    -------
    points : (T,Q,3) or (Q,3), weights : (T,Q) or (Q,).
    Weights sum to the (unsigned) volume of each tetrahedron.
    """
    v = np.asarray(vertices, dtype=float)
    single = v.ndim == 2
    if single:
        v = v[None]
    ref_pts, ref_w = reference_tet_rule(order)
    e = v[:, 1:, :] - v[:, :1, :]  # (T,3,3)
    det = np.abs(np.linalg.det(e))
    if single and det[0] == 0.0:
        raise GeometryError("degenerate tetrahedron in quadrature")
    pts = v[:, None, 0, :] + np.einsum("qi,tij->tqj", ref_pts, e)
    # reference weights sum to 1/6; physical volume is det/6
    w = det[:, None] * ref_w[None, :]
    if single:
        return pts[0], w[0]
    return pts, w


def tri_rule(vertices, order: int):
    """Quadrature for one or more triangles embedded in 3D.

    Weights sum to the triangle area.
    """
    v = np.asarray(vertices, dtype=float)
    single = v.ndim == 2
    if single:
        v = v[None]
    ref_pts, ref_w = reference_tri_rule(order)
    e1 = v[:, 1, :] - v[:, 0, :]
    e2 = v[:, 2, :] - v[:, 0, :]
    area2 = np.linalg.norm(np.cross(e1, e2), axis=1)  # 2*area
    if single and area2[0] == 0.0:
        raise GeometryError("degenerate triangle in quadrature")
    pts = (v[:, None, 0, :]
           + ref_pts[None, :, 0, None] * e1[:, None, :]
           + ref_pts[None, :, 1, None] * e2[:, None, :])
    # reference weights sum to 1/2; physical area is |e1 x e2| / 2
    w = area2[:, None] * ref_w[None, :]
    if single:
        return pts[0], w[0]
    return pts, w


@lru_cache(maxsize=None)
def reference_box_rule(order: int):
    """Tensor Gauss rule on the unit cube; exact to `order` per variable."""
    x, w = reference_gauss_1d(order)
    xx, yy, zz = np.meshgrid(x, x, x, indexing="ij")
    ww = (w[:, None, None] * w[None, :, None] * w[None, None, :]).ravel()
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1), ww


@lru_cache(maxsize=None)
def reference_square_rule(order: int):
    """Tensor Gauss rule on the unit square; exact to `order` per variable."""
    x, w = reference_gauss_1d(order)
    xx, yy = np.meshgrid(x, x, indexing="ij")
    ww = (w[:, None] * w[None, :]).ravel()
    return np.stack([xx.ravel(), yy.ravel()], axis=1), ww


def simplex_volume(vertices) -> np.ndarray:
    """Unsigned volume(s) of tetrahedra given as (...,4,3)."""
    v = np.asarray(vertices, dtype=float)
    e = v[..., 1:, :] - v[..., :1, :]
    return np.abs(np.linalg.det(e)) / 6.0


def triangle_area(vertices) -> np.ndarray:
    """Area(s) of triangles given as (...,3,3)."""
    v = np.asarray(vertices, dtype=float)
    e1 = v[..., 1, :] - v[..., 0, :]
    e2 = v[..., 2, :] - v[..., 0, :]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=-1)
