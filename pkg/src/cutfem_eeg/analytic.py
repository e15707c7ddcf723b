"""Semi-analytic forward solution for dipoles in concentric sphere models.

The potential of a dipole inside the innermost shell of an m-layer
isotropic conductor sphere is expanded in a Legendre series.  Per degree
n the radial profile in each layer is A r^n + B r^-(n+1); continuity of
potential and radial current at the shell interfaces plus the insulating
outer boundary determine the profile up to one amplitude, which is fixed
by the dipole's singular part.  The per-degree transfer across layers is
evaluated outside-in with locally rescaled coefficient pairs, which
keeps every intermediate quantity O(1) for any truncation order.

Electrode potentials are returned re-referenced to zero mean.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

log = logging.getLogger(__name__)

_TAIL_REL = 1e-10
_RESCALE = 1e100


@dataclass(frozen=True)
class SphereModel:
    """Concentric shells, outermost first; isotropic conductivities."""

    radii: tuple            # strictly decreasing
    conductivities: tuple   # per shell, same order
    center: tuple = (0.0, 0.0, 0.0)
    n_terms: int = 200

    def __post_init__(self):
        radii = tuple(float(r) for r in self.radii)
        conds = tuple(float(c) for c in self.conductivities)
        center = tuple(float(c) for c in self.center)
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "conductivities", conds)
        object.__setattr__(self, "center", center)
        if len(radii) != len(conds) or not radii:
            raise ConfigurationError("radii and conductivities must pair up")
        if any(r2 >= r1 for r1, r2 in zip(radii, radii[1:])):
            raise ConfigurationError("radii must be strictly decreasing (outermost first)")
        if any(c <= 0.0 for c in conds):
            raise ConfigurationError("conductivities must be positive")
        if self.n_terms < 10:
            raise ConfigurationError("n_terms must be >= 10")

    @property
    def outer_radius(self) -> float:
        return self.radii[0]

    @property
    def inner_radius(self) -> float:
        return self.radii[-1]


def _radial_factors(model: SphereModel, n_max: int):
    """Per-degree scalp amplitude factors.

    For degree n the returned g[n-1], logf[n-1], x1 satisfy

        scalp_term = B1 * g * exp(-logf)

    where B1 is the dipole's singular coefficient written in the scaled
    radial basis (r/R)^-(n+1) divided by x1^(n+1) (x1 = innermost
    interface radius / outer radius; 1 for a homogeneous sphere).
    """
    m = len(model.radii)
    rr = np.asarray(model.radii) / model.outer_radius  # 1 = x_outer > ... > x1
    sig = np.asarray(model.conductivities)
    ns = np.arange(1, n_max + 1, dtype=float)
    a = np.ones(n_max)
    b = ns / (ns + 1.0)
    scalp = a + b                       # (2n+1)/(n+1)
    logf = np.zeros(n_max)
    for j in range(m - 1):              # walk inwards across interfaces
        t = rr[j + 1] / rr[j]
        a = a * t ** ns
        b = b * t ** -(ns + 1.0)
        big = np.maximum(np.abs(a), np.abs(b))
        resc = big > _RESCALE
        if resc.any():
            a[resc] /= big[resc]
            b[resc] /= big[resc]
            logf[resc] += np.log(big[resc])
        s = sig[j] / sig[j + 1]
        c1 = a + b
        c2 = s * (ns * a - (ns + 1.0) * b)
        a = ((ns + 1.0) * c1 + c2) / (2.0 * ns + 1.0)
        b = (ns * c1 - c2) / (2.0 * ns + 1.0)
    x1 = rr[-1]
    if np.any(b <= 0.0):
        raise ConfigurationError("degenerate sphere model (vanishing radial profile)")
    g = scalp / b
    return g, logf, x1


@dataclass
class _ModelCache:
    g: np.ndarray
    logf: np.ndarray
    x1: float
    n_max: int


_cache: dict = {}


def _factors(model: SphereModel, n_max: int) -> _ModelCache:
    key = (model.radii, model.conductivities, n_max)
    hit = _cache.get(key)
    if hit is None:
        g, logf, x1 = _radial_factors(model, n_max)
        hit = _ModelCache(g=g, logf=logf, x1=x1, n_max=n_max)
        _cache[key] = hit
    return hit


def sphere_forward(model: SphereModel, dipole_position, dipole_moment,
                   electrode_positions, n_terms: int | None = None) -> np.ndarray:
    """Electrode potentials of one dipole, re-referenced to zero mean.

    Electrodes are snapped radially onto the outer surface.  Raises when
    the dipole is not strictly inside the innermost shell or when the
    series truncation is insufficient.
    """
    n_terms = model.n_terms if n_terms is None else int(n_terms)
    center = np.asarray(model.center)
    x0 = np.asarray(dipole_position, dtype=float) - center
    p = np.asarray(dipole_moment, dtype=float)
    radius = model.outer_radius
    b = float(np.linalg.norm(x0))
    if b >= model.inner_radius:
        raise ConfigurationError(
            f"dipole at radius {b:.6g} is not strictly inside the innermost "
            f"shell (radius {model.inner_radius:.6g})")

    elec = np.atleast_2d(np.asarray(electrode_positions, dtype=float)) - center
    enorm = np.linalg.norm(elec, axis=1)
    if np.any(enorm == 0.0):
        raise ConfigurationError("electrode at the sphere center")
    snap = np.abs(enorm - radius).max()
    if snap > 1e-9 * radius:
        log.info("snapped electrodes radially by up to %.3g", snap)
    e_hat = elec / enorm[:, None]

    if b > 0.0:
        z_hat = x0 / b
    else:
        pn = np.linalg.norm(p)
        z_hat = p / pn if pn > 0.0 else np.array([0.0, 0.0, 1.0])
    p_rad = float(p @ z_hat)
    p_tan_vec = p - p_rad * z_hat
    p_tan = float(np.linalg.norm(p_tan_vec))
    x_hat = p_tan_vec / p_tan if p_tan > 0.0 else np.zeros(3)

    cos_t = np.clip(e_hat @ z_hat, -1.0, 1.0)
    ex = e_hat @ x_hat                       # sin(theta)*cos(phi)

    fac = _factors(model, n_terms)
    ratio = (b / radius) / fac.x1            # dipole radius over innermost shell
    sigma_in = model.conductivities[-1]
    pref = 1.0 / (4.0 * np.pi * sigma_in * fac.x1 ** 2 * radius ** 2)
    ns = np.arange(1, n_terms + 1, dtype=float)
    with np.errstate(under="ignore"):
        s_n = pref * fac.g * np.exp(-fac.logf) * ratio ** (ns - 1.0)

    out = np.zeros(len(e_hat))
    p_nm1, p_n = np.ones_like(cos_t), cos_t          # P_0, P_1
    dp_nm1, dp_n = np.zeros_like(cos_t), np.ones_like(cos_t)
    tail = []
    for k, n in enumerate(ns):
        term = s_n[k] * (p_rad * n * p_n + p_tan * dp_n * ex)
        out += term
        tail.append(float(np.abs(term).max()))
        if k + 1 < n_terms:
            p_np1 = ((2.0 * n + 1.0) * cos_t * p_n - n * p_nm1) / (n + 1.0)
            dp_np1 = (2.0 * n + 1.0) * p_n + dp_nm1
            p_nm1, p_n = p_n, p_np1
            dp_nm1, dp_n = dp_n, dp_np1

    scale = np.abs(out).max()
    if scale > 0.0:
        last = np.asarray(tail[-6:])
        head = last[:-1]
        ratios = last[1:][head > 0.0] / head[head > 0.0]
        rho = float(np.median(ratios)) if len(ratios) else 0.0
        if rho >= 1.0:
            raise ConfigurationError(
                "sphere series does not converge; increase n_terms")
        tail_est = last[-1] * rho / (1.0 - rho) if rho > 0.0 else 0.0
        if tail_est > _TAIL_REL * scale:
            raise ConfigurationError(
                f"sphere series truncation too coarse (tail estimate "
                f"{tail_est / scale:.2e} of the solution); increase n_terms")
    return out - out.mean()


def sphere_lead_row(model: SphereModel, dipole_position, electrode_positions,
                    n_terms: int | None = None) -> np.ndarray:
    """(E,3) map from dipole moment to zero-mean electrode potentials."""
    cols = [sphere_forward(model, dipole_position, m, electrode_positions, n_terms)
            for m in np.eye(3)]
    return np.stack(cols, axis=1)
