"""Bayesian kernel inference over labeled points with an anisotropic kernel.

Each voxel carries a Dirichlet concentration vector over the non-void semantic
classes. Every labeled observation adds its kernel weight, evaluated at the
voxel center, to the count of its class. Occupancy is decided on the total
accumulated kernel mass; labels come either from the posterior argmax or from
the nearest observation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.linalg import solve_triangular
from scipy.spatial import cKDTree

from .grid import GridConfig, LabelSpace, SemanticLabel, VoxelGrid, unflatten_index, index_to_center_array

CLASSES = np.array([int(s) for s in SemanticLabel if s not in (SemanticLabel.VOID, SemanticLabel.UNKNOWN)],
                   dtype=np.uint8)
MODES = ("kernel-argmax", "kernel-occupancy-then-nn")
_CHUNK = 1 << 16


class BkiConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BkiConfig:
    """Kernel metric, prior, and truncation settings.

    ``k=None`` and ``support_radius=inf`` together give the exact, untruncated
    update used by the oracles.
    """

    S: tuple = ((0.09, 0.0, 0.0), (0.0, 0.09, 0.0), (0.0, 0.0, 0.04))
    prior_alpha: float = 1e-3
    support_radius: float = 1.0
    k: int | None = 8
    occupancy_threshold: float = 0.1
    mode: str = "kernel-occupancy-then-nn"
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        S = np.asarray(self.S, dtype=np.float64)
        if S.shape != (3, 3) or not np.isfinite(S).all():
            raise BkiConfigError("S must be a finite 3x3 matrix")
        if not np.allclose(S, S.T, rtol=0, atol=1e-12 * max(1.0, np.abs(S).max())):
            raise BkiConfigError("S must be symmetric")
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise BkiConfigError("S must be positive definite") from None
        if not self.prior_alpha > 0:
            raise BkiConfigError("prior_alpha must be positive")
        if not self.support_radius > 0:
            raise BkiConfigError("support_radius must be positive")
        if self.k is not None and (int(self.k) != self.k or self.k < 1):
            raise BkiConfigError("k must be a positive integer or None")
        if self.mode not in MODES:
            raise BkiConfigError(f"mode must be one of {MODES}")
        if not self.occupancy_threshold >= 0:
            raise BkiConfigError("occupancy_threshold must be non-negative")
        object.__setattr__(self, "S", tuple(tuple(float(v) for v in row) for row in S))
        object.__setattr__(self, "_chol", L)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.S)

    def mahalanobis_sq(self, delta: np.ndarray) -> np.ndarray:
        """Squared Mahalanobis length of each row of ``delta``."""
        y = solve_triangular(self._chol, np.atleast_2d(delta).T, lower=True)
        return np.sum(y * y, axis=0)

    def to_json(self) -> dict:
        return {
            "S": [list(r) for r in self.S],
            "prior_alpha": self.prior_alpha,
            "support_radius_m": self.support_radius if math.isfinite(self.support_radius) else None,
            "k": self.k,
            "occupancy_threshold": self.occupancy_threshold,
            "mode": self.mode,
        }

    @classmethod
    def from_json(cls, d: dict) -> "BkiConfig":
        defaults = cls()
        radius = d.get("support_radius_m", defaults.support_radius)
        return cls(
            S=d.get("S", defaults.S),
            prior_alpha=float(d.get("prior_alpha", defaults.prior_alpha)),
            support_radius=math.inf if radius is None else float(radius),
            k=d.get("k", defaults.k),
            occupancy_threshold=float(d.get("occupancy_threshold", defaults.occupancy_threshold)),
            mode=d.get("mode", defaults.mode),
        )


def kernel(x, x2, S) -> float:
    """exp(-d^2 / 2) with d the Mahalanobis distance under metric ``S``."""
    bk = S if isinstance(S, BkiConfig) else BkiConfig(S=S)
    delta = np.asarray(x, dtype=float) - np.asarray(x2, dtype=float)
    return float(np.exp(-0.5 * bk.mahalanobis_sq(delta.reshape(1, 3))[0]))


@dataclass
class DirichletGrid:
    """Posterior concentrations, stored sparsely.

    Only voxels that received kernel mass are listed in ``voxels``; every other
    voxel sits at the prior. Column c of ``mass`` belongs to ``CLASSES[c]``.
    """

    config: GridConfig
    prior_alpha: float
    voxels: np.ndarray
    mass: np.ndarray

    @property
    def num_classes(self) -> int:
        return CLASSES.size

    def alpha(self) -> np.ndarray:
        """Dense (num_voxels, C) concentration array."""
        out = np.full((self.config.num_voxels, self.num_classes), self.prior_alpha)
        out[self.voxels] += self.mass
        return out

    def total_mass(self) -> np.ndarray:
        out = np.zeros(self.config.num_voxels)
        out[self.voxels] = self.mass.sum(axis=1)
        return out


def _class_columns(labels: np.ndarray) -> np.ndarray:
    lut = np.full(256, -1, dtype=np.int64)
    lut[CLASSES] = np.arange(CLASSES.size)
    cols = lut[np.asarray(labels, dtype=np.uint8)]
    if (cols < 0).any():
        raise ValueError("observations must carry non-void semantic labels")
    return cols


def _candidate_voxels(xyz: np.ndarray, cfg: GridConfig, radius: float) -> np.ndarray:
    """Flat indices of voxels whose center may lie within ``radius`` of an observation."""
    if not math.isfinite(radius):
        return np.arange(cfg.num_voxels)
    m = int(math.ceil(radius / cfg.voxel_size)) + 1
    dims = np.asarray(cfg.dims)
    idx = np.floor((xyz - np.asarray(cfg.origin)) / cfg.voxel_size).astype(np.int64)
    keep = np.all((idx >= -m) & (idx < dims + m), axis=1)
    idx = np.clip(idx[keep], 0, dims - 1)
    seed = np.zeros(cfg.dims, dtype=bool)
    seed[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    grown = ndimage.maximum_filter(seed, size=2 * m + 1, mode="constant")
    return np.flatnonzero(grown.ravel())


def bki_update(xyz, labels, cfg: GridConfig, bk: BkiConfig, *, threads: int = 1) -> DirichletGrid:
    """Accumulate kernel-weighted class counts at every voxel center."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    cols = _class_columns(labels)
    C = CLASSES.size
    if xyz.shape[0] == 0:
        return DirichletGrid(cfg, bk.prior_alpha, np.zeros(0, np.int64), np.zeros((0, C)))
    cand = _candidate_voxels(xyz, cfg, bk.support_radius)
    tree = cKDTree(xyz)
    n_obs = xyz.shape[0]
    rows, obs = [], []
    for start in range(0, cand.size, _CHUNK):
        vox = cand[start:start + _CHUNK]
        centers = index_to_center_array(unflatten_index(vox, cfg), cfg)
        if bk.k is None:
            if math.isfinite(bk.support_radius):
                lists = tree.query_ball_point(centers, bk.support_radius, workers=threads)
                lens = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(lists))
                r = np.repeat(np.arange(vox.size), lens)
                o = np.fromiter((i for l in lists for i in sorted(l)), dtype=np.int64, count=int(lens.sum()))
            else:
                r = np.repeat(np.arange(vox.size), n_obs)
                o = np.tile(np.arange(n_obs), vox.size)
        else:
            k = min(int(bk.k), n_obs)
            bound = np.nextafter(bk.support_radius, np.inf) if math.isfinite(bk.support_radius) else np.inf
            dist, nn = tree.query(centers, k=k, distance_upper_bound=bound, workers=threads)
            dist, nn = dist.reshape(vox.size, k), nn.reshape(vox.size, k)
            hit = nn < n_obs
            if math.isfinite(bk.support_radius):
                hit &= dist <= bk.support_radius
            r = np.nonzero(hit)[0]
            o = nn[hit]
        rows.append(r + start)
        obs.append(o)
    row = np.concatenate(rows)
    ob = np.concatenate(obs)
    centers = index_to_center_array(unflatten_index(cand[row], cfg), cfg)
    w = np.exp(-0.5 * bk.mahalanobis_sq(centers - xyz[ob]))
    key = row * C + cols[ob]
    acc = np.bincount(key, weights=w, minlength=cand.size * C).reshape(cand.size, C)
    touched = np.bincount(row, minlength=cand.size) > 0
    return DirichletGrid(cfg, bk.prior_alpha, cand[touched], acc[touched])


def occupancy(dg: DirichletGrid, threshold: float) -> np.ndarray:
    """Flat indices of voxels whose accumulated kernel mass exceeds ``threshold``."""
    total = dg.mass.sum(axis=1)
    return dg.voxels[total > threshold]


def classify(dg: DirichletGrid, occupancy_threshold: float) -> VoxelGrid:
    """Posterior-argmax labels on occupied voxels; ties go to the smaller class id."""
    labels = np.zeros(dg.config.num_voxels, dtype=np.uint8)
    if dg.voxels.size:
        occ = dg.mass.sum(axis=1) > occupancy_threshold
        alpha = dg.prior_alpha + dg.mass[occ]
        labels[dg.voxels[occ]] = CLASSES[np.argmax(alpha, axis=1)]
    return VoxelGrid(dg.config, labels, LabelSpace.SEMANTIC)


def nn_assign(centers: np.ndarray, xyz, labels, *, threads: int = 1) -> np.ndarray:
    """Label of the nearest observation to each query point.

    Equidistant observations resolve to the one with the smallest input ordinal.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels)
    if xyz.shape[0] == 0:
        raise ValueError("nearest-neighbor assignment needs at least one observation")
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if centers.shape[0] == 0:
        return labels[:0].copy()
    tree = cKDTree(xyz)
    k = min(4, xyz.shape[0])
    dist, nn = tree.query(centers, k=k, workers=threads)
    dist, nn = dist.reshape(-1, k), nn.reshape(-1, k)
    tied = dist == dist[:, :1]
    best = np.where(tied, nn, np.iinfo(np.int64).max).min(axis=1)
    # all k neighbors tie: more equidistant observations may exist beyond k
    overflow = np.flatnonzero(tied.all(axis=1)) if k < xyz.shape[0] else np.zeros(0, np.int64)
    for q in overflow:
        d0 = dist[q, 0]
        ball = tree.query_ball_point(centers[q], np.nextafter(d0, np.inf))
        d = np.sqrt(np.sum((xyz[ball] - centers[q]) ** 2, axis=1))
        ball = np.asarray(ball)[d <= d0]
        if ball.size:
            best[q] = min(best[q], ball.min())
    return labels[best]


def complete_scene(xyz, labels, cfg: GridConfig, bk: BkiConfig, mode: str | None = None,
                   *, threads: int = 1) -> VoxelGrid:
    mode = mode or bk.mode
    if mode not in MODES:
        raise BkiConfigError(f"mode must be one of {MODES}")
    dg = bki_update(xyz, labels, cfg, bk, threads=threads)
    if mode == "kernel-argmax":
        return classify(dg, bk.occupancy_threshold)
    out = np.zeros(cfg.num_voxels, dtype=np.uint8)
    occ = occupancy(dg, bk.occupancy_threshold)
    if occ.size:
        centers = index_to_center_array(unflatten_index(occ, cfg), cfg)
        out[occ] = nn_assign(centers, xyz, labels, threads=threads)
    return VoxelGrid(cfg, out, LabelSpace.SEMANTIC)
