"""Voxel grid geometry, label spaces, and the binary grid file format."""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"ORDG"
FORMAT_VERSION = 1
# magic, version u16, tag u8, reserved u8, dims 3*u32, voxel f32, origin 3*f32, class count u8
_HEADER = struct.Struct("<4sHBB3If3fB")
HEADER_SIZE = _HEADER.size
FACE_SNAP = 1e-9


class SemanticLabel(enum.IntEnum):
    VOID = 0
    GRASS = 1
    TREE = 2
    HARD_SURFACE = 3
    OBJECT = 4
    BUSH = 5
    WATER = 6
    PERSON = 7
    MUD = 8
    RUBBLE = 9
    UNKNOWN = 255

    @property
    def label_name(self) -> str:
        return self.name.lower().replace("_", "-")


class CostLabel(enum.IntEnum):
    """Traversability cost levels; integer order is severity order."""

    EMPTY = 0
    FREE = 1
    LOW_COST = 2
    MEDIUM_COST = 3
    LETHAL = 4
    UNKNOWN = 255

    @property
    def label_name(self) -> str:
        return self.name.lower()


class LabelSpace(enum.IntEnum):
    SEMANTIC = 0
    COST = 1

    @property
    def enum(self) -> type[enum.IntEnum]:
        return SemanticLabel if self is LabelSpace.SEMANTIC else CostLabel

    @property
    def num_classes(self) -> int:
        """Number of in-mask classes, id 0 (void/empty) included."""
        return len(self.enum) - 1

    @property
    def unknown(self) -> int:
        return 255

    def valid_ids(self) -> np.ndarray:
        return np.array(sorted(int(v) for v in self.enum), dtype=np.uint8)

    def names(self) -> dict[int, str]:
        return {int(v): v.label_name for v in self.enum}

    @classmethod
    def parse(cls, text: str) -> "LabelSpace":
        try:
            return cls[text.upper()]
        except KeyError:
            raise ValueError(f"unknown label space {text!r}; expected 'semantic' or 'cost'") from None


def semantic_from_name(name: str) -> SemanticLabel:
    key = name.strip().upper().replace("-", "_")
    try:
        return SemanticLabel[key]
    except KeyError:
        raise ValueError(f"unknown semantic label {name!r}") from None


def cost_from_name(name: str) -> CostLabel:
    key = name.strip().upper().replace("-", "_")
    try:
        return CostLabel[key]
    except KeyError:
        raise ValueError(f"unknown cost label {name!r}") from None


@dataclass(frozen=True)
class GridConfig:
    """Axis-aligned voxel lattice.

    Each axis covers the half-open interval ``[origin, origin + dims * voxel_size)``.
    The defaults reproduce the 38.4 m x 51.2 m x 8 m forward-facing volume at 0.2 m.
    """

    origin: tuple[float, float, float] = (0.0, -25.6, -2.0)
    dims: tuple[int, int, int] = (192, 256, 40)
    voxel_size: float = 0.2

    def __post_init__(self):
        origin = tuple(float(v) for v in self.origin)
        dims = tuple(int(v) for v in self.dims)
        if len(origin) != 3 or len(dims) != 3:
            raise ValueError("origin and dims must have three components")
        if not np.all(np.isfinite(origin)):
            raise ValueError(f"origin must be finite, got {origin}")
        if any(d < 1 for d in dims):
            raise ValueError(f"all dims must be >= 1, got {dims}")
        if not (np.isfinite(self.voxel_size) and self.voxel_size > 0):
            raise ValueError(f"voxel_size must be > 0, got {self.voxel_size}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def num_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.dims) * self.voxel_size

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "dims": list(self.dims), "voxel_size": self.voxel_size}

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        return cls(origin=tuple(d["origin"]), dims=tuple(d["dims"]), voxel_size=d["voxel_size"])


def world_to_index(p, cfg: GridConfig) -> tuple[int, int, int] | None:
    """Voxel index containing ``p``, or None when ``p`` lies outside the grid."""
    idx = world_to_index_array(np.asarray(p, dtype=float).reshape(1, 3), cfg)[0]
    if idx[0] < 0:
        return None
    return int(idx[0]), int(idx[1]), int(idx[2])


def _axis_indices(coords: np.ndarray, origin, dims, voxel_size: float) -> np.ndarray:
    t = (coords - np.asarray(origin)) / voxel_size
    # snap coordinates within FACE_SNAP voxels of a face onto it, so decimal
    # boundaries like 38.4 m (191.99999999999997 voxels) stay on the right side
    nearest = np.round(t)
    t = np.where(np.abs(t - nearest) < FACE_SNAP, nearest, t)
    with np.errstate(invalid="ignore"):
        idx = np.floor(t)
    inside = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
    return np.where(inside[:, None], idx, -1).astype(np.int64)


def world_to_index_array(points: np.ndarray, cfg: GridConfig) -> np.ndarray:
    """Vectorized :func:`world_to_index`; out-of-range rows are ``(-1, -1, -1)``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return _axis_indices(pts, cfg.origin, cfg.dims, cfg.voxel_size)


def world_to_cell_array(xy: np.ndarray, cfg: GridConfig) -> np.ndarray:
    """(i, j) ground-lattice cell of each (x, y); out-of-range rows are ``(-1, -1)``."""
    pts = np.asarray(xy, dtype=float).reshape(-1, 2)
    return _axis_indices(pts, cfg.origin[:2], cfg.dims[:2], cfg.voxel_size)


def index_to_center(i, cfg: GridConfig) -> np.ndarray:
    ii = np.asarray(i, dtype=np.int64)
    if ii.shape != (3,) or np.any(ii < 0) or np.any(ii >= np.asarray(cfg.dims)):
        raise IndexError(f"voxel index {tuple(ii.tolist())} outside dims {cfg.dims}")
    return np.asarray(cfg.origin) + (ii + 0.5) * cfg.voxel_size


def index_to_center_array(idx: np.ndarray, cfg: GridConfig) -> np.ndarray:
    return np.asarray(cfg.origin) + (np.asarray(idx, dtype=float) + 0.5) * cfg.voxel_size


def flat_index(idx: np.ndarray, cfg: GridConfig) -> np.ndarray:
    """x-major linearization: x varies slowest, z fastest."""
    idx = np.asarray(idx, dtype=np.int64)
    _, ny, nz = cfg.dims
    return (idx[..., 0] * ny + idx[..., 1]) * nz + idx[..., 2]


def unflatten_index(flat: np.ndarray, cfg: GridConfig) -> np.ndarray:
    return np.stack(np.unravel_index(np.asarray(flat, dtype=np.int64), cfg.dims), axis=-1)


def voxel_centers(cfg: GridConfig) -> np.ndarray:
    """All voxel centers, shape (num_voxels, 3), in linear order."""
    axes = [cfg.origin[k] + (np.arange(cfg.dims[k]) + 0.5) * cfg.voxel_size for k in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


@dataclass
class VoxelGrid:
    """Dense label volume; ``labels`` is a flat uint8 array in x-major order."""

    config: GridConfig
    labels: np.ndarray
    space: LabelSpace = LabelSpace.SEMANTIC
    names: dict[int, str] | None = field(default=None, compare=False)

    def __post_init__(self):
        self.space = LabelSpace(self.space)
        labels = np.asarray(self.labels)
        if labels.ndim != 1:
            labels = labels.reshape(-1)
        if labels.size != self.config.num_voxels:
            raise ValueError(
                f"labels length {labels.size} does not match dims product {self.config.num_voxels}"
            )
        labels = labels.astype(np.uint8, copy=False)
        bad = ~np.isin(labels, self.space.valid_ids())
        if bad.any():
            raise ValueError(f"labels contain ids outside the {self.space.name.lower()} space: "
                             f"{sorted(set(labels[bad].tolist()))[:10]}")
        self.labels = labels

    @classmethod
    def filled(cls, cfg: GridConfig, value: int = 0, space: LabelSpace = LabelSpace.SEMANTIC) -> "VoxelGrid":
        return cls(cfg, np.full(cfg.num_voxels, value, dtype=np.uint8), space)

    def volume(self) -> np.ndarray:
        """Labels viewed as an (nx, ny, nz) array (no copy)."""
        return self.labels.reshape(self.config.dims)

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.config, self.labels.copy(), self.space, self.names)

    def __eq__(self, other) -> bool:
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (self.config == other.config and self.space == other.space
                and np.array_equal(self.labels, other.labels))


class GridDecodeError(ValueError):
    """Base class for malformed grid streams."""


class BadMagicError(GridDecodeError):
    pass


class UnsupportedVersionError(GridDecodeError):
    pass


class TruncatedStreamError(GridDecodeError):
    pass


class LengthMismatchError(GridDecodeError):
    pass


class InvalidLabelSpaceError(GridDecodeError):
    pass


def _f32_decimal(v: float) -> float:
    # shortest decimal that round-trips through f32, so 0.2 stored as f32 reads back as 0.2
    return float(str(np.float32(v)))


def encode_grid(g: VoxelGrid) -> bytes:
    cfg = g.config
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, int(g.space), 0, *cfg.dims,
                          cfg.voxel_size, *cfg.origin, g.space.num_classes)
    return header + g.labels.tobytes()


def write_grid(g: VoxelGrid, sink: BinaryIO) -> int:
    data = encode_grid(g)
    sink.write(data)
    return len(data)


def decode_grid(data: bytes) -> VoxelGrid:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < HEADER_SIZE:
        raise TruncatedStreamError(f"header truncated: {len(data)} of {HEADER_SIZE} bytes")
    _, version, tag, _, nx, ny, nz, vs, ox, oy, oz, ncls = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version}, expected {FORMAT_VERSION}")
    try:
        space = LabelSpace(tag)
    except ValueError:
        raise InvalidLabelSpaceError(f"unknown label-space tag {tag}") from None
    if ncls != space.num_classes:
        raise InvalidLabelSpaceError(
            f"class count {ncls} does not match {space.name.lower()} space ({space.num_classes})")
    n = nx * ny * nz
    payload = memoryview(data)[HEADER_SIZE:]
    if n == 0:
        raise LengthMismatchError(f"dims {(nx, ny, nz)} contain a zero extent")
    if len(payload) < n:
        raise TruncatedStreamError(f"payload truncated: {len(payload)} of {n} bytes")
    if len(payload) != n:
        raise LengthMismatchError(f"payload has {len(payload)} bytes, dims product is {n}")
    labels = np.frombuffer(payload, dtype=np.uint8).copy()
    if not np.isin(labels, space.valid_ids()).all():
        raise InvalidLabelSpaceError(f"payload holds ids outside the {space.name.lower()} space")
    cfg = GridConfig(origin=(_f32_decimal(ox), _f32_decimal(oy), _f32_decimal(oz)),
                     dims=(nx, ny, nz), voxel_size=_f32_decimal(vs))
    return VoxelGrid(cfg, labels, space)


def read_grid(source: BinaryIO) -> VoxelGrid:
    return decode_grid(source.read())


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def sidecar_payload(g: VoxelGrid) -> dict:
    names = g.names or g.space.names()
    return {
        "label_space": g.space.name.lower(),
        "classes": {str(k): v for k, v in sorted(names.items())},
    }


def save_grid(g: VoxelGrid, path: str | Path) -> None:
    """Write the grid and its JSON id->name sidecar, each atomically."""
    from .io_util import atomic_write_bytes

    path = Path(path)
    atomic_write_bytes(path, encode_grid(g))
    sidecar = json.dumps(sidecar_payload(g), indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(sidecar_path(path), sidecar.encode())


def load_grid(path: str | Path) -> VoxelGrid:
    with open(path, "rb") as fh:
        g = read_grid(fh)
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        g.names = {int(k): v for k, v in meta.get("classes", {}).items()}
    return g
