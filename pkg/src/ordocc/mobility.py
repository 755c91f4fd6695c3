"""Vehicle obstacle-crossing conditions and the Step Mask.

Four failure modes are checked per ground cell: a step too high for the front
wheels, a slope steeper than the climbing limit, a trench wider than the wheels
can bridge, and an overhang too low to drive under.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geomfeat import DEFAULT_GROUND_CLASSES, ElevationMap, GeomFeatures
from .grid import LabelSpace, VoxelGrid


class MobilityError(ValueError):
    pass


class UndefinedConditionError(MobilityError):
    """The step-climbing expression divides by a zero friction coefficient."""


class InfeasibleGeometryError(MobilityError):
    """The step-climbing expression has a negative radicand."""


@dataclass(frozen=True)
class VehicleParams:
    wheel_radius: float = 0.4
    wheelbase: float = 2.0
    cg_front_dist: float = 1.0
    friction: float = 0.6
    lidar_height: float = 2.0
    max_climb: float = math.radians(30.0)

    def __post_init__(self):
        if not self.wheel_radius > 0 or not self.wheelbase > 0:
            raise ValueError("wheel radius and wheelbase must be positive")
        if not 0 < self.cg_front_dist < self.wheelbase:
            raise ValueError("cg_front_dist must lie strictly between 0 and the wheelbase")
        if not self.friction > 0:
            raise ValueError("friction coefficient must be positive")
        if not 0 < self.max_climb < math.pi / 2:
            raise ValueError("max climbing angle must be in (0, pi/2)")

    @property
    def wheel_diameter(self) -> float:
        return 2.0 * self.wheel_radius

    def to_json(self) -> dict:
        return {
            "wheel_radius_m": self.wheel_radius,
            "wheelbase_m": self.wheelbase,
            "cg_front_dist_m": self.cg_front_dist,
            "friction": self.friction,
            "lidar_height_m": self.lidar_height,
            "max_climb_deg": math.degrees(self.max_climb),
        }

    @classmethod
    def from_json(cls, d: dict) -> "VehicleParams":
        defaults = cls()
        return cls(
            wheel_radius=float(d.get("wheel_radius_m", defaults.wheel_radius)),
            wheelbase=float(d.get("wheelbase_m", defaults.wheelbase)),
            cg_front_dist=float(d.get("cg_front_dist_m", defaults.cg_front_dist)),
            friction=float(d.get("friction", defaults.friction)),
            lidar_height=float(d.get("lidar_height_m", defaults.lidar_height)),
            max_climb=math.radians(float(d.get("max_climb_deg", math.degrees(defaults.max_climb)))),
        )


def step_height_ratio(mu: float, r_over_l: float, a_over_l: float) -> float:
    """Climbable step height over wheel radius for a 4x4 vehicle's front axle."""
    if mu == 0:
        raise UndefinedConditionError("friction coefficient is zero")
    eta = (1.0 - mu * r_over_l - (1.0 + mu * mu) * a_over_l) / mu
    if not math.isfinite(eta):
        raise UndefinedConditionError(f"eta is not finite for mu={mu}")
    radicand = 1.0 - 2.0 * mu * r_over_l + eta * eta
    if radicand < 0:
        raise InfeasibleGeometryError(f"negative radicand {radicand}")
    num = 1.0 - mu * r_over_l + eta * eta - eta * math.sqrt(radicand)
    den = (1.0 + mu * r_over_l) ** 2 + eta * eta
    return num / den


def max_step_height(v: VehicleParams) -> float:
    r, l = v.wheel_radius, v.wheelbase
    return r * step_height_ratio(v.friction, r / l, v.cg_front_dist / l)


def max_trench_width(h_over_D: float, D: float) -> float:
    """Widest trench a wheel of diameter ``D`` bridges when it may sink by ``h``."""
    if not 0.0 <= h_over_D <= 1.0:
        raise MobilityError(f"h/D = {h_over_D} outside [0, 1]")
    return D * 2.0 * math.sqrt(h_over_D * (1.0 - h_over_D))


def overhang_passable(h_obj: float, h_pc: float, v: VehicleParams) -> bool:
    return h_obj > h_pc + v.lidar_height


def slope_passable(alpha: float, v: VehicleParams) -> bool:
    return v.max_climb > alpha


@dataclass
class StepMask:
    """True marks a ground cell the vehicle cannot pass.

    ``reasons`` holds the per-condition layers; ``unknown`` marks cells whose
    features were invalid and therefore could not be judged.
    """

    mask: np.ndarray
    unknown: np.ndarray
    reasons: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def stats(self) -> dict:
        out = {"cells": int(self.mask.size), "masked": int(self.mask.sum()),
               "unknown": int(self.unknown.sum())}
        out.update({f"masked_{k}": int(v.sum()) for k, v in self.reasons.items()})
        return out


_DIRECTIONS = ((1, 0), (0, 1), (1, 1), (1, -1))


def _shear(nx: int, ny: int, d: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """Row/column placement that turns lattice lines along ``d`` into columns.

    Returns (rows, cols, shape) such that ``out[rows, cols] = a`` stacks every
    line of direction ``d`` in its own column, ordered along the line.
    """
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    if d == (1, 0):
        return i, j, (nx, ny)
    if d == (0, 1):
        return j, i, (ny, nx)
    if d == (1, 1):
        return i, j - i + (nx - 1), (nx, nx + ny - 1)
    return i, i + j, (nx, nx + ny - 1)


def _run_lengths(flags: np.ndarray) -> np.ndarray:
    """Length of the run of True along axis 0 each element belongs to (0 for False)."""
    n = flags.shape[0]
    idx = np.arange(n).reshape((n,) + (1,) * (flags.ndim - 1))
    prev_false = np.maximum.accumulate(np.where(flags, -1, idx), axis=0)
    next_false = np.flip(np.minimum.accumulate(np.flip(np.where(flags, n, idx), axis=0), axis=0), axis=0)
    return np.where(flags, next_false - prev_false - 1, 0)


def trench_mask(emap: ElevationMap, depth_threshold: float, max_width: float,
                search_radius: float = 2.0) -> np.ndarray:
    """Cells lying in a depression too wide to bridge.

    Along each of the four lattice directions a cell is depressed when the
    higher of its two rims (highest valid cell within ``search_radius`` on that
    side) is more than ``depth_threshold`` above it on both sides. The crossing
    extent is the length of the depressed run through the cell; the smallest
    extent over the directions in which the cell is depressed is compared with
    ``max_width``.
    """
    nx, ny = emap.shape
    vs = emap.config.voxel_size
    z = np.where(emap.valid, emap.elevation, -np.inf)
    crossing = np.full((nx, ny), np.inf)
    for d in _DIRECTIONS:
        step = vs * math.hypot(*d)
        w = max(1, int(math.floor(search_radius / step + 1e-9)))
        rows, cols, shape = _shear(nx, ny, d)
        lines = np.full(shape, -np.inf)
        lines[rows, cols] = z
        n = shape[0]
        pad = np.full((n + 2 * w, shape[1]), -np.inf)
        pad[w:w + n] = lines
        win = sliding_window_view(pad, w, axis=0)
        back = win[:n].max(axis=-1)
        fwd = win[w + 1:w + 1 + n].max(axis=-1)
        with np.errstate(invalid="ignore"):
            depth = np.minimum(back, fwd) - lines
            depressed = np.isfinite(lines) & (depth > depth_threshold)
        width = np.where(depressed, _run_lengths(depressed) * step, np.inf)
        crossing = np.minimum(crossing, width[rows, cols])
    return np.isfinite(crossing) & (crossing > max_width)


def overhang_clearance(emap: ElevationMap, semantic: VoxelGrid,
                       ground_classes: Iterable[int] = DEFAULT_GROUND_CLASSES) -> np.ndarray:
    """Height above ground of the lowest suspended non-ground voxel in each column.

    A voxel counts as suspended when at least one empty voxel separates it from
    the stack of occupied voxels rising from the ground cell; obstacles standing
    on the ground are left to the semantic cost. Columns without one get +inf.
    """
    cfg = semantic.config
    nx, ny, nz = cfg.dims
    vol = semantic.volume()
    occupied = (vol != 0) & (vol != semantic.space.unknown)
    nonground = occupied & ~np.isin(vol, np.fromiter((int(c) for c in ground_classes), dtype=np.int64))
    valid = emap.valid
    elev = np.where(valid, emap.elevation, 0.0)
    kz0 = np.floor((elev - cfg.origin[2]) / cfg.voxel_size).astype(np.int64)
    kz0 = np.clip(kz0, -1, nz - 1)
    k = np.arange(nz)[None, None, :]
    above = k > kz0[:, :, None]
    gap = above & ~occupied
    first_gap = np.where(gap.any(axis=2), gap.argmax(axis=2), nz)
    cand = nonground & (k > first_gap[:, :, None])
    has = cand.any(axis=2) & valid
    kob = cand.argmax(axis=2)
    bottom = cfg.origin[2] + kob * cfg.voxel_size
    return np.where(has, np.maximum(bottom - elev, 0.0), np.inf)


def compute_step_mask(features: GeomFeatures, emap: ElevationMap, v: VehicleParams,
                      semantic: VoxelGrid | None = None, *,
                      ground_classes: Iterable[int] = DEFAULT_GROUND_CLASSES,
                      trench_search_radius: float = 2.0,
                      overhang_margin: float = 0.0) -> StepMask:
    """Combine the four crossing conditions into a per-cell mask.

    ``overhang_margin`` plays the role of the obstacle's height relative to the
    sensor; the clearance check needs the semantic grid and is skipped without it.
    """
    if features.shape != emap.shape:
        raise MobilityError(f"features {features.shape} and map {emap.shape} are not aligned")
    if semantic is not None:
        if semantic.config.dims[:2] != emap.shape:
            raise MobilityError("semantic grid and elevation map lattices differ")
        if semantic.space is not LabelSpace.SEMANTIC:
            raise MobilityError("overhang check needs a semantic grid")
    valid = features.valid
    h_max = max_step_height(v)
    D = v.wheel_diameter
    l_d = max_trench_width(min(max(h_max / D, 0.0), 1.0), D)

    with np.errstate(invalid="ignore"):
        step_fail = valid & (features.step > h_max)
        slope_fail = valid & ~(v.max_climb > features.slope)
    trench_fail = valid & trench_mask(emap, h_max, l_d, trench_search_radius)
    reasons = {"step": step_fail, "slope": slope_fail, "trench": trench_fail}
    if semantic is not None:
        clearance = overhang_clearance(emap, semantic, ground_classes)
        reasons["overhang"] = valid & ~(clearance > overhang_margin + v.lidar_height)
    mask = np.zeros(emap.shape, dtype=bool)
    for layer in reasons.values():
        mask |= layer
    return StepMask(mask, emap.valid & ~valid, reasons)
