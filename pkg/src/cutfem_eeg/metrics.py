"""Error measures between electrode potential vectors and a dipole scan.

RDM (topography error, percent, 0..100) and MAG (magnitude error,
percent, >= -100) compare a numerical against a reference solution.
Both are computed on re-referenced (zero-mean) vectors so that the
pure-Neumann gauge cannot bias them; the measures themselves are applied
verbatim afterwards:

    RDM = 50 * | u_ref/|u_ref| - u_num/|u_num| |_2
    MAG = 100 * (|u_num| / |u_ref| - 1)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

log = logging.getLogger(__name__)

ECC_BIN_WIDTH = 0.02
REALISTIC_BAND = (0.96, 0.98)


def _referenced(u, name: str) -> np.ndarray:
    v = np.asarray(u, dtype=float)
    if v.ndim != 1 or len(v) < 2:
        raise ConfigurationError(f"{name} must be a vector of length >= 2")
    if not np.all(np.isfinite(v)):
        raise ConfigurationError(f"{name} contains non-finite entries")
    v = v - v.mean()
    if np.linalg.norm(v) == 0.0:
        raise ConfigurationError(f"{name} is zero after re-referencing")
    return v


def rdm(u_ref, u_num) -> float:
    """Relative difference measure in percent (0 best, 100 worst)."""
    a = _referenced(u_ref, "u_ref")
    b = _referenced(u_num, "u_num")
    if len(a) != len(b):
        raise ConfigurationError("vectors must have equal length")
    d = a / np.linalg.norm(a) - b / np.linalg.norm(b)
    return float(50.0 * np.linalg.norm(d))


def mag(u_ref, u_num) -> float:
    """Magnitude error in percent (0 best, bounded below by -100)."""
    a = _referenced(u_ref, "u_ref")
    b = _referenced(u_num, "u_num")
    if len(a) != len(b):
        raise ConfigurationError("vectors must have equal length")
    return float(100.0 * (np.linalg.norm(b) / np.linalg.norm(a) - 1.0))


@dataclass
class LeadField:
    """Electrode potentials per unit dipole moment.

    ``matrix`` has shape (electrodes, sources*3) with three consecutive
    columns (x, y, z moment) per source; every column has zero mean.
    """

    matrix: np.ndarray
    positions: np.ndarray  # (S,3)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        pos = np.asarray(self.positions, dtype=float)
        if m.ndim != 2 or pos.ndim != 2 or m.shape[1] != 3 * len(pos):
            raise ConfigurationError("lead field must be (electrodes, sources*3)")
        if not np.all(np.isfinite(m)):
            raise ConfigurationError("lead field contains non-finite entries")
        col_mean = np.abs(m.mean(axis=0))
        scale = np.abs(m).max() if m.size else 0.0
        if scale and col_mean.max() > 1e-9 * scale:
            raise ConfigurationError("lead field columns are not zero-mean")
        self.matrix = m
        self.positions = pos

    @property
    def n_electrodes(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_sources(self) -> int:
        return len(self.positions)

    def block(self, source: int) -> np.ndarray:
        return self.matrix[:, 3 * source:3 * source + 3]

    def potentials(self, source: int, moment) -> np.ndarray:
        return self.block(source) @ np.asarray(moment, dtype=float)


@dataclass(frozen=True)
class ScanResult:
    source_index: int
    gof_percent: float
    moment: tuple
    skipped: int = 0


def dipole_scan(leadfield, data) -> ScanResult:
    """Single-dipole scan: per source, least-squares fit of the 3-column
    block; returns the best source (goodness of fit in percent, smallest
    index wins ties).  Rank-deficient blocks are skipped and logged."""
    lf = leadfield.matrix if isinstance(leadfield, LeadField) else np.asarray(leadfield)
    d = _referenced(data, "data")
    if lf.ndim != 2 or lf.shape[1] % 3:
        raise ConfigurationError("lead field must have 3 columns per source")
    if lf.shape[0] != len(d):
        raise ConfigurationError("data length does not match lead field")
    n_src = lf.shape[1] // 3
    d2 = float(d @ d)
    best = (-1.0, -1, np.zeros(3))
    skipped = 0
    for s in range(n_src):
        block = lf[:, 3 * s:3 * s + 3]
        block = block - block.mean(axis=0)
        u, sv, vt = np.linalg.svd(block, full_matrices=False)
        if sv[-1] <= 1e-12 * sv[0]:
            skipped += 1
            log.info("dipole scan: source %d skipped (rank-deficient block)", s)
            continue
        m = vt.T @ ((u.T @ d) / sv)
        resid = d - block @ m
        gof = 100.0 * (1.0 - float(resid @ resid) / d2)
        if gof > best[0]:
            best = (gof, s, m)
    if best[1] < 0:
        raise ConfigurationError("all lead-field blocks were rank deficient")
    return ScanResult(source_index=best[1], gof_percent=best[0],
                      moment=tuple(best[2]), skipped=skipped)


@dataclass
class SourceRecord:
    """One validation record: a source/direction pair with its errors."""

    position: tuple
    eccentricity: float
    direction: str      # 'radial' | 'tangential' | 'tangential2' | 'x|y|z'
    rdm: float
    mag: float


def eccentricity_bin(ecc: float) -> float:
    """Lower edge of the 0.02-wide eccentricity bin (capped at 0.98)."""
    if np.isnan(ecc):
        return float("nan")
    edge = min(np.floor(ecc / ECC_BIN_WIDTH) * ECC_BIN_WIDTH, 0.98)
    return round(edge, 10)


def summarize_bins(records) -> list:
    """Per-bin (lower edge, count, median RDM, max RDM, median MAG,
    max |MAG|), sorted by bin edge."""
    bins = {}
    for r in records:
        bins.setdefault(eccentricity_bin(r.eccentricity), []).append(r)
    out = []
    for edge in sorted(k for k in bins if not np.isnan(k)):
        rs = bins[edge]
        rdms = np.array([r.rdm for r in rs])
        mags = np.array([r.mag for r in rs])
        out.append({
            "bin": edge,
            "count": len(rs),
            "rdm_median": float(np.median(rdms)),
            "rdm_max": float(rdms.max()),
            "mag_median": float(np.median(mags)),
            "mag_abs_max": float(np.abs(mags).max()),
            "realistic": REALISTIC_BAND[0] <= edge < REALISTIC_BAND[1],
        })
    return out


def band_median_rdm(records, lo: float, hi: float) -> float:
    """Median RDM of records with eccentricity in [lo, hi)."""
    vals = [r.rdm for r in records if lo <= r.eccentricity < hi]
    if not vals:
        raise ConfigurationError(f"no sources in eccentricity band [{lo}, {hi})")
    return float(np.median(vals))


def write_report(path, records, header_lines=()) -> None:
    """Structured text report: one record per source/direction plus a
    per-bin summary block (plot-ready, tab separated)."""
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("# x\ty\tz\teccentricity\tdirection\trdm_percent\tmag_percent\n")
        for r in records:
            x, y, z = r.position
            fh.write(f"{x:.9g}\t{y:.9g}\t{z:.9g}\t{r.eccentricity:.6f}\t"
                     f"{r.direction}\t{r.rdm:.6f}\t{r.mag:.6f}\n")
        fh.write("#\n# bin\tcount\trdm_median\trdm_max\tmag_median\tmag_abs_max"
                 "\trealistic_band\n")
        for row in summarize_bins(records):
            fh.write(f"# {row['bin']:.2f}\t{row['count']}\t{row['rdm_median']:.6f}\t"
                     f"{row['rdm_max']:.6f}\t{row['mag_median']:.6f}\t"
                     f"{row['mag_abs_max']:.6f}\t{'*' if row['realistic'] else '-'}\n")
