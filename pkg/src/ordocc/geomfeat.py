"""2.5D elevation map and per-cell terrain features: step height, slope, unevenness.

Every feature is evaluated over a circular neighborhood of ground cells. The
scalar functions (:func:`step_height`, :func:`fit_plane`, ...) work on one cell
and are the reference path; :func:`compute_features` evaluates the whole map at
once and must agree with them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .grid import GridConfig, SemanticLabel, world_to_cell_array

UNEVENNESS_EPS = 1e-6
EIGEN_TIE_TOL = 1e-12

DEFAULT_GROUND_CLASSES = frozenset({
    SemanticLabel.GRASS, SemanticLabel.HARD_SURFACE, SemanticLabel.MUD,
    SemanticLabel.RUBBLE, SemanticLabel.WATER,
})


@dataclass
class ElevationMap:
    """Ground height per (x, y) cell of a grid's horizontal lattice.

    ``elevation`` is NaN where a cell received no ground points. The raw ground
    points stay attached (sorted by cell) so that each cell's point matrix can be
    inspected via :meth:`bucket`.
    """

    config: GridConfig
    elevation: np.ndarray
    count: np.ndarray
    points: np.ndarray | None = None
    point_cell: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.config.dims[0], self.config.dims[1]

    @property
    def valid(self) -> np.ndarray:
        return self.count >= 1

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        vs = self.config.voxel_size
        return self.config.origin[0] + (i + 0.5) * vs, self.config.origin[1] + (j + 0.5) * vs

    def bucket(self, i: int, j: int) -> np.ndarray:
        """The 3 x n matrix of ground points that fell into cell (i, j)."""
        if self.points is None:
            raise ValueError("point buckets were released")
        key = i * self.shape[1] + j
        lo, hi = np.searchsorted(self.point_cell, [key, key + 1])
        return self.points[lo:hi].T.copy()

    def release_buckets(self) -> None:
        self.points = None
        self.point_cell = None

    @classmethod
    def from_elevations(cls, cfg: GridConfig, elevation: np.ndarray) -> "ElevationMap":
        """Build a map directly from a height field (NaN marks invalid cells)."""
        elev = np.array(elevation, dtype=np.float64)
        if elev.shape != cfg.dims[:2]:
            raise ValueError(f"elevation shape {elev.shape} does not match lattice {cfg.dims[:2]}")
        count = np.isfinite(elev).astype(np.int64)
        elev[count == 0] = np.nan
        return cls(cfg, elev, count)


@dataclass(frozen=True)
class NeighborhoodSpec:
    radius: float = 0.6
    min_valid_cells: int = 3

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("neighborhood radius must be positive")
        if self.min_valid_cells < 3:
            raise ValueError("min_valid_cells must be >= 3")

    def offsets(self, voxel_size: float) -> np.ndarray:
        """Integer (di, dj) lattice offsets whose cell centers lie within the radius."""
        if self.radius < voxel_size * (1 - 1e-12):
            raise ValueError(f"neighborhood radius {self.radius} is below one cell width {voxel_size}")
        r = int(math.floor(self.radius / voxel_size + 1e-9))
        di, dj = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
        inside = (di * di + dj * dj) * voxel_size ** 2 <= self.radius ** 2 * (1 + 1e-9)
        return np.stack([di[inside], dj[inside]], axis=1)


@dataclass(frozen=True)
class PlaneFit:
    a0: float
    a1: float
    c: float
    normal: tuple[float, float, float]
    residual_mse: float
    count: int


@dataclass
class GeomFeatures:
    """Per-cell features; NaN marks an invalid value."""

    step: np.ndarray
    slope: np.ndarray
    unevenness: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.step) & np.isfinite(self.slope) & np.isfinite(self.unevenness)

    @property
    def shape(self) -> tuple[int, int]:
        return self.step.shape


def build_elevation_map(cloud, cfg: GridConfig,
                        ground_classes: Iterable[int] = DEFAULT_GROUND_CLASSES) -> ElevationMap:
    """Bucket ground-class points by (x, y) cell; elevation is the mean bucket height."""
    nx, ny = cfg.dims[:2]
    if cloud.labels is None:
        raise ValueError("elevation mapping needs a labeled cloud")
    ground = np.isin(cloud.labels, np.fromiter((int(c) for c in ground_classes), dtype=np.int64))
    pts = cloud.xyz[ground]
    cells = world_to_cell_array(pts[:, :2], cfg)
    inside = cells[:, 0] >= 0
    pts, cells = pts[inside], cells[inside]
    key = cells[:, 0] * ny + cells[:, 1]
    count = np.bincount(key, minlength=nx * ny)
    zsum = np.bincount(key, weights=pts[:, 2], minlength=nx * ny)
    with np.errstate(invalid="ignore", divide="ignore"):
        elev = np.where(count > 0, zsum / np.maximum(count, 1), np.nan)
    order = np.argsort(key, kind="stable")
    return ElevationMap(cfg, elev.reshape(nx, ny), count.reshape(nx, ny),
                        pts[order], key[order])


def _neighborhood(emap: ElevationMap, cell, nb: NeighborhoodSpec) -> tuple[np.ndarray, np.ndarray]:
    """Offsets and valid-mask of the neighborhood cells around ``cell``."""
    i, j = cell
    nx, ny = emap.shape
    off = nb.offsets(emap.config.voxel_size)
    ii, jj = i + off[:, 0], j + off[:, 1]
    inb = (ii >= 0) & (ii < nx) & (jj >= 0) & (jj < ny)
    off, ii, jj = off[inb], ii[inb], jj[inb]
    ok = emap.valid[ii, jj]
    return off[ok], emap.elevation[ii[ok], jj[ok]]


def step_height(emap: ElevationMap, cell, nb: NeighborhoodSpec) -> float | None:
    """Largest absolute elevation difference between ``cell`` and its valid neighbors."""
    i, j = cell
    if not emap.valid[i, j]:
        return None
    off, z = _neighborhood(emap, cell, nb)
    others = np.any(off != 0, axis=1)
    if not others.any():
        return None
    return float(np.max(np.abs(emap.elevation[i, j] - z[others])))


def fit_plane(emap: ElevationMap, cell, nb: NeighborhoodSpec) -> PlaneFit | None:
    off, z = _neighborhood(emap, cell, nb)
    m = len(z)
    if m < nb.min_valid_cells:
        return None
    x0, y0 = emap.cell_center(*cell)
    vs = emap.config.voxel_size
    pts = np.column_stack([x0 + off[:, 0] * vs, y0 + off[:, 1] * vs, z])
    centroid = pts.mean(axis=0)
    d = pts - centroid
    cov = d.T @ d / m
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] - evals[0] <= EIGEN_TIE_TOL:
        return None
    axy = cov[:2, :2]
    if np.linalg.det(axy) <= EIGEN_TIE_TOL * max(np.trace(axy) ** 2, 1e-300):
        return None
    a0, a1 = np.linalg.solve(axy, cov[:2, 2])
    c = centroid[2] - a0 * centroid[0] - a1 * centroid[1]
    resid = d[:, 2] - a0 * d[:, 0] - a1 * d[:, 1]
    n = evecs[:, 0]
    if n[2] < 0:
        n = -n
    n = n / np.linalg.norm(n)
    return PlaneFit(float(a0), float(a1), float(c), (float(n[0]), float(n[1]), float(n[2])),
                    float(np.mean(resid ** 2)), m)


def normal_slope(normal) -> float:
    """Angle between an upward normal and +Z."""
    nx, ny, nz = normal
    # arccos(nz/|n|) written with atan2 for accuracy near 0 and pi/2
    return math.atan2(math.hypot(nx, ny), nz)


def slope(emap: ElevationMap, cell, nb: NeighborhoodSpec) -> float | None:
    fit = fit_plane(emap, cell, nb)
    return None if fit is None else normal_slope(fit.normal)


def unevenness(emap: ElevationMap, cell, nb: NeighborhoodSpec, eps: float = UNEVENNESS_EPS) -> float | None:
    """Natural log of the plane-fit residual MSE, floored by ``eps``."""
    fit = fit_plane(emap, cell, nb)
    return None if fit is None else math.log(fit.residual_mse + eps)


def compute_features(emap: ElevationMap, nb: NeighborhoodSpec, eps: float = UNEVENNESS_EPS) -> GeomFeatures:
    """Vectorized step/slope/unevenness for every cell of the map."""
    nx, ny = emap.shape
    vs = emap.config.voxel_size
    off = nb.offsets(vs)
    r = int(np.abs(off).max())
    elev = np.where(emap.valid, emap.elevation, 0.0)
    zp = np.pad(elev, r)
    vp = np.pad(emap.valid, r)

    def shifted(a, di, dj):
        return a[r + di:r + di + nx, r + dj:r + dj + ny]

    m = np.zeros((nx, ny))
    sx = np.zeros((nx, ny))
    sy = np.zeros((nx, ny))
    sz = np.zeros((nx, ny))
    for di, dj in off:
        v = shifted(vp, di, dj)
        m += v
        sx += v * (di * vs)
        sy += v * (dj * vs)
        sz += np.where(v, shifted(zp, di, dj), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mx, my, mz = sx / m, sy / m, sz / m

    cxx, cxy, cyy, cxz, cyz, czz = (np.zeros((nx, ny)) for _ in range(6))
    step = np.full((nx, ny), -np.inf)
    center_z = elev
    for di, dj in off:
        v = shifted(vp, di, dj)
        z = shifted(zp, di, dj)
        dx = np.where(v, di * vs - mx, 0.0)
        dy = np.where(v, dj * vs - my, 0.0)
        dz = np.where(v, z - mz, 0.0)
        cxx += dx * dx
        cxy += dx * dy
        cyy += dy * dy
        cxz += dx * dz
        cyz += dy * dz
        czz += dz * dz
        if di or dj:
            step = np.where(v, np.maximum(step, np.abs(center_z - z)), step)
    step = np.where(emap.valid & np.isfinite(step), step, np.nan)

    slope_a = np.full((nx, ny), np.nan)
    unev = np.full((nx, ny), np.nan)
    cand = m >= nb.min_valid_cells
    if cand.any():
        mm = m[cand]
        cov = np.empty((mm.size, 3, 3))
        cov[:, 0, 0] = cxx[cand] / mm
        cov[:, 0, 1] = cov[:, 1, 0] = cxy[cand] / mm
        cov[:, 1, 1] = cyy[cand] / mm
        cov[:, 0, 2] = cov[:, 2, 0] = cxz[cand] / mm
        cov[:, 1, 2] = cov[:, 2, 1] = cyz[cand] / mm
        cov[:, 2, 2] = czz[cand] / mm
        evals, evecs = np.linalg.eigh(cov)
        det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
        tr = cov[:, 0, 0] + cov[:, 1, 1]
        ok = (evals[:, 1] - evals[:, 0] > EIGEN_TIE_TOL) & (det > EIGEN_TIE_TOL * np.maximum(tr ** 2, 1e-300))
        n = evecs[:, :, 0] * np.where(evecs[:, 2:3, 0] < 0, -1.0, 1.0)
        s = np.arctan2(np.hypot(n[:, 0], n[:, 1]), n[:, 2])
        with np.errstate(invalid="ignore", divide="ignore"):
            a0 = (cov[:, 1, 1] * cov[:, 0, 2] - cov[:, 0, 1] * cov[:, 1, 2]) / det
            a1 = (cov[:, 0, 0] * cov[:, 1, 2] - cov[:, 0, 1] * cov[:, 0, 2]) / det
        s_full = np.full((nx, ny), np.nan)
        s_full[cand] = np.where(ok, s, np.nan)
        slope_a = s_full
        A0 = np.zeros((nx, ny))
        A1 = np.zeros((nx, ny))
        A0[cand] = np.where(ok, a0, 0.0)
        A1[cand] = np.where(ok, a1, 0.0)
        ss = np.zeros((nx, ny))
        for di, dj in off:
            v = shifted(vp, di, dj)
            z = shifted(zp, di, dj)
            res = (z - mz) - A0 * (di * vs - mx) - A1 * (dj * vs - my)
            ss += np.where(v, res * res, 0.0)
        good = np.isfinite(slope_a)
        with np.errstate(invalid="ignore", divide="ignore"):
            unev = np.where(good, np.log(ss / m + eps), np.nan)
    return GeomFeatures(step, slope_a, unev)


def export_features_csv(emap: ElevationMap, feats: GeomFeatures, path: str | Path) -> None:
    """Debug dump, one row per cell: indices, elevation, h, s, u, valid."""
    from .io_util import atomic_write_text
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "j", "elevation", "step", "slope", "unevenness", "valid"])
    valid = feats.valid
    nx, ny = emap.shape

    def fmt(v):
        return "" if not np.isfinite(v) else repr(float(v))

    for i in range(nx):
        for j in range(ny):
            w.writerow([i, j, fmt(emap.elevation[i, j]), fmt(feats.step[i, j]),
                        fmt(feats.slope[i, j]), fmt(feats.unevenness[i, j]), int(valid[i, j])])
    atomic_write_text(path, buf.getvalue())
