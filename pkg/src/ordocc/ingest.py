"""Point cloud, label, pose, and calibration loading; multi-frame aggregation;
semantic voxelization and camera field-of-view masking."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Mapping, Sequence

import numpy as np

from .grid import (
    GridConfig,
    LabelSpace,
    SemanticLabel,
    VoxelGrid,
    flat_index,
    voxel_centers,
    world_to_index_array,
)

logger = logging.getLogger(__name__)

POINT_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4")])
POSE_TOL = 1e-6

# Raw ids that already are SemanticLabel ids.
IDENTITY_ID_MAP: dict[int, int] = {int(v): int(v) for v in SemanticLabel if v != SemanticLabel.UNKNOWN}

# RELLIS-3D ontology remapped onto the ten-class label set.
RELLIS3D_ID_MAP: dict[int, int] = {
    0: SemanticLabel.VOID, 1: SemanticLabel.HARD_SURFACE, 3: SemanticLabel.GRASS,
    4: SemanticLabel.TREE, 5: SemanticLabel.OBJECT, 6: SemanticLabel.WATER,
    7: SemanticLabel.VOID, 8: SemanticLabel.OBJECT, 9: SemanticLabel.OBJECT,
    10: SemanticLabel.HARD_SURFACE, 12: SemanticLabel.OBJECT, 15: SemanticLabel.OBJECT,
    17: SemanticLabel.PERSON, 18: SemanticLabel.OBJECT, 19: SemanticLabel.BUSH,
    23: SemanticLabel.HARD_SURFACE, 27: SemanticLabel.OBJECT, 31: SemanticLabel.WATER,
    33: SemanticLabel.MUD, 34: SemanticLabel.RUBBLE,
}
RELLIS3D_ID_MAP = {k: int(v) for k, v in RELLIS3D_ID_MAP.items()}

CLOUD_DIRS = ("velodyne", "os1_cloud_node_kitti_bin")
LABEL_DIRS = ("labels", "os1_cloud_node_semantickitti_label_id")


class IngestError(ValueError):
    pass


class FrameLengthError(IngestError):
    pass


class UnknownLabelIdError(IngestError):
    pass


class PoseError(IngestError):
    pass


@dataclass
class PointCloudFrame:
    xyz: np.ndarray
    intensity: np.ndarray
    labels: np.ndarray | None = None
    frame_index: int = 0

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float32).reshape(-1)
        if self.intensity.size != len(self.xyz):
            raise FrameLengthError("intensity must have one entry per point")
        if not np.isfinite(self.xyz).all():
            raise IngestError("point coordinates must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
            if self.labels.size != len(self.xyz):
                raise FrameLengthError(
                    f"{self.labels.size} labels for {len(self.xyz)} points")

    def __len__(self) -> int:
        return len(self.xyz)

    @classmethod
    def from_points(cls, xyz, labels=None, intensity=None, frame_index: int = 0) -> "PointCloudFrame":
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        if intensity is None:
            intensity = np.zeros(len(xyz), dtype=np.float32)
        return cls(xyz, intensity, labels, frame_index)

    @classmethod
    def empty(cls, labeled: bool = True) -> "PointCloudFrame":
        return cls(np.zeros((0, 3)), np.zeros(0, np.float32),
                   np.zeros(0, np.uint8) if labeled else None)

    def to_bytes(self) -> tuple[bytes, bytes | None]:
        """Serialize to the 16-byte-per-point cloud and u32 label encodings."""
        rec = np.empty(len(self), dtype=POINT_DTYPE)
        rec["x"], rec["y"], rec["z"] = self.xyz.T
        rec["intensity"] = self.intensity
        lab = None if self.labels is None else self.labels.astype("<u4").tobytes()
        return rec.tobytes(), lab


@dataclass(frozen=True)
class Pose:
    """Rigid transform p' = R p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise PoseError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > POSE_TOL or abs(np.linalg.det(R) - 1.0) > POSE_TOL:
            raise PoseError("rotation is not orthonormal with determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape == (12,):
            m = m.reshape(3, 4)
        if m.shape not in ((3, 4), (4, 4)):
            raise PoseError(f"pose matrix must be 3x4 or 4x4, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self after other."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        return np.asarray(xyz, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: Pose = Pose.identity()

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    def project(self, xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixel coordinates (u, v) and camera depth for ego-frame points."""
        pc = self.extrinsic.apply(xyz)
        depth = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / depth + self.cx
            v = self.fy * pc[:, 1] / depth + self.cy
        return u, v, depth

    def in_view(self, xyz: np.ndarray) -> np.ndarray:
        u, v, depth = self.project(xyz)
        with np.errstate(invalid="ignore"):
            return (depth > 0) & (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "extrinsic": self.extrinsic.matrix().tolist()}


def _read_source(source) -> bytes:
    if source is None:
        return b""
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if isinstance(source, (str, Path)):
        return Path(source).read_bytes()
    return source.read()


def decode_labels(raw: np.ndarray, id_map: Mapping[int, int] | None = None,
                  strict: bool = False) -> np.ndarray:
    """Semantic ids from u32 label words: low 16 bits, remapped through ``id_map``."""
    id_map = IDENTITY_ID_MAP if id_map is None else id_map
    sem = np.asarray(raw, dtype=np.uint32) & 0xFFFF
    lut = np.full(1 << 16, -1, dtype=np.int32)
    for k, v in id_map.items():
        lut[int(k)] = int(v)
    out = lut[sem]
    bad = out < 0
    if bad.any():
        ids = sorted(set(sem[bad].tolist()))
        if strict:
            raise UnknownLabelIdError(f"unknown raw label ids {ids[:10]}")
        logger.warning("%d points carry unknown raw label ids %s; mapped to void", int(bad.sum()), ids[:10])
        out[bad] = SemanticLabel.VOID
    return out.astype(np.uint8)


def load_frame(cloud: str | Path | bytes | BinaryIO, labels=None, *, frame_index: int = 0,
               id_map: Mapping[int, int] | None = None, strict: bool = False) -> PointCloudFrame:
    """Decode one frame of 16-byte (x, y, z, intensity) records and optional u32 labels."""
    data = _read_source(cloud)
    if len(data) % POINT_DTYPE.itemsize:
        raise FrameLengthError(f"cloud stream of {len(data)} bytes is not a multiple of 16")
    rec = np.frombuffer(data, dtype=POINT_DTYPE)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    sem = None
    if labels is not None:
        ldata = _read_source(labels)
        if len(ldata) % 4 or len(ldata) // 4 != len(rec):
            raise FrameLengthError(
                f"label stream of {len(ldata)} bytes does not match {len(rec)} points")
        sem = decode_labels(np.frombuffer(ldata, dtype="<u4"), id_map, strict)
    return PointCloudFrame(xyz, rec["intensity"].copy(), sem, frame_index)


def load_poses(path: str | Path, invert: bool = False) -> list[Pose]:
    """One pose per line: 12 floats, row-major 3x4 [R | t]."""
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) != 12:
            raise PoseError(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
        try:
            pose = Pose.from_matrix(np.array(vals, dtype=np.float64))
        except (ValueError, PoseError) as exc:
            raise PoseError(f"{path}:{lineno}: {exc}") from None
        poses.append(pose.inverse() if invert else pose)
    return poses


def load_calibration(path: str | Path) -> CameraModel:
    d = json.loads(Path(path).read_text())
    try:
        ext = Pose.from_matrix(np.asarray(d.get("extrinsic", np.eye(4)), dtype=float))
        return CameraModel(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                           int(d["width"]), int(d["height"]), ext)
    except KeyError as exc:
        raise IngestError(f"{path}: calibration is missing {exc}") from None


def aggregate_frames(frames: Sequence[PointCloudFrame], poses: Sequence[Pose],
                     reference: int) -> PointCloudFrame:
    """Map every frame into the coordinate system of frame ``reference``.

    ``poses[i]`` takes frame-i coordinates to the common world frame, so frame i
    reaches the reference through ``poses[reference]^-1 * poses[i]``.
    """
    if len(frames) != len(poses):
        raise PoseError(f"{len(frames)} frames but {len(poses)} poses")
    if not 0 <= reference < len(frames):
        raise IndexError(f"reference frame {reference} outside 0..{len(frames) - 1}")
    ref_inv = poses[reference].inverse()
    xyz, inten, labs = [], [], []
    labeled = all(f.labels is not None for f in frames)
    for i, (frame, pose) in enumerate(zip(frames, poses)):
        if i == reference:
            xyz.append(frame.xyz)
        else:
            xyz.append(ref_inv.compose(pose).apply(frame.xyz))
        inten.append(frame.intensity)
        if labeled:
            labs.append(frame.labels)
    if not frames:
        return PointCloudFrame.empty()
    return PointCloudFrame(np.concatenate(xyz), np.concatenate(inten),
                           np.concatenate(labs) if labeled else None,
                           frames[reference].frame_index)


def vote_counts(cloud: PointCloudFrame, cfg: GridConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-(voxel, label) vote tallies of in-range, non-void points.

    Returns ``(flat_voxel, label, count)`` sorted by voxel then label.
    """
    if cloud.labels is None:
        raise IngestError("voxelization needs a labeled cloud")
    idx = world_to_index_array(cloud.xyz, cfg)
    keep = (idx[:, 0] >= 0) & (cloud.labels != SemanticLabel.VOID) & (cloud.labels != SemanticLabel.UNKNOWN)
    flat = flat_index(idx[keep], cfg)
    key = flat * 256 + cloud.labels[keep].astype(np.int64)
    uniq, count = np.unique(key, return_counts=True)
    return uniq // 256, (uniq % 256).astype(np.uint8), count


def voxelize_semantic(cloud: PointCloudFrame, cfg: GridConfig) -> VoxelGrid:
    """Majority label per voxel; ties go to the smallest class id; no votes -> void."""
    labels = np.zeros(cfg.num_voxels, dtype=np.uint8)
    flat, lab, count = vote_counts(cloud, cfg)
    if flat.size:
        order = np.lexsort((lab, -count, flat))
        flat, lab = flat[order], lab[order]
        first = np.ones(flat.size, dtype=bool)
        first[1:] = flat[1:] != flat[:-1]
        labels[flat[first]] = lab[first]
    return VoxelGrid(cfg, labels, LabelSpace.SEMANTIC)


def fov_mask(grid: VoxelGrid, cam: CameraModel) -> VoxelGrid:
    """Set voxels whose centers fall outside the camera image to ``unknown``."""
    keep = cam.in_view(voxel_centers(grid.config))
    out = grid.labels.copy()
    out[~keep] = grid.space.unknown
    return VoxelGrid(grid.config, out, grid.space, grid.names)


@dataclass
class SequenceLayout:
    root: Path
    cloud_files: list[Path]
    label_files: list[Path | None]
    poses_path: Path
    calib_path: Path | None


def _first_dir(root: Path, names: Sequence[str]) -> Path | None:
    for n in names:
        if (root / n).is_dir():
            return root / n
    return None


def scan_sequence(root: str | Path) -> SequenceLayout:
    """Locate frames, labels, poses, and calibration in a sequence directory.

    Layout: ``velodyne/*.bin``, ``labels/*.label``, ``poses.txt``, optional ``calib.json``
    (RELLIS-3D directory names are accepted as well).
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"sequence directory not found: {root}")
    cdir = _first_dir(root, CLOUD_DIRS)
    if cdir is None:
        raise FileNotFoundError(f"no point cloud directory ({'/'.join(CLOUD_DIRS)}) in {root}")
    clouds = sorted(cdir.glob("*.bin"))
    if not clouds:
        raise FileNotFoundError(f"no .bin frames in {cdir}")
    ldir = _first_dir(root, LABEL_DIRS)
    labels: list[Path | None] = []
    for c in clouds:
        lp = ldir / (c.stem + ".label") if ldir is not None else None
        labels.append(lp if lp is not None and lp.exists() else None)
    poses = root / "poses.txt"
    if not poses.exists():
        raise FileNotFoundError(f"poses file not found: {poses}")
    calib = root / "calib.json"
    return SequenceLayout(root, clouds, labels, poses, calib if calib.exists() else None)


def load_frames(seq: SequenceLayout, frame_ids: Sequence[int], *, threads: int = 1,
                id_map: Mapping[int, int] | None = None, strict: bool = False) -> list[PointCloudFrame]:
    def one(i: int) -> PointCloudFrame:
        lab = seq.label_files[i]
        if lab is None:
            raise FileNotFoundError(f"labels missing for frame {seq.cloud_files[i].name}")
        return load_frame(seq.cloud_files[i], lab, frame_index=i, id_map=id_map, strict=strict)

    if threads <= 1:
        return [one(i) for i in frame_ids]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, frame_ids))
