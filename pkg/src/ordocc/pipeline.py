"""End-to-end annotation: frames -> semantic grid -> Step Mask -> cost grid."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

from .config import PipelineConfig
from .costmap import apply_step_mask, map_semantics_to_cost
from .geomfeat import ElevationMap, GeomFeatures, build_elevation_map, compute_features
from .grid import VoxelGrid
from .ingest import (
    CameraModel,
    PointCloudFrame,
    PoseError,
    aggregate_frames,
    fov_mask,
    load_calibration,
    load_frames,
    load_poses,
    scan_sequence,
    voxelize_semantic,
)
from .mobility import StepMask, compute_step_mask


@dataclass
class AnnotationResult:
    semantic: VoxelGrid
    cost: VoxelGrid
    elevation: ElevationMap
    features: GeomFeatures
    step_mask: StepMask
    manifest: dict = field(default_factory=dict)


def resolve_window(n_frames: int, key: int, window: int, frames: tuple[int, int] | None) -> tuple[int, int]:
    """Half-open frame range used for densification around ``key``."""
    if not 0 <= key < n_frames:
        raise IndexError(f"key frame {key} outside 0..{n_frames - 1}")
    if frames is None:
        start, end = key, min(n_frames, key + window)
    else:
        start, end = frames
        start = max(0, start)
        end = min(n_frames, end)
    if not start <= key < end:
        raise IndexError(f"key frame {key} is not inside the frame range [{start}, {end})")
    return start, end


def annotate_cloud(cloud: PointCloudFrame, cfg: PipelineConfig,
                   camera: CameraModel | None = None) -> AnnotationResult:
    """Annotate an already aggregated, labeled cloud expressed in the key frame."""
    t0 = time.perf_counter()
    semantic = voxelize_semantic(cloud, cfg.grid)
    emap = build_elevation_map(cloud, cfg.grid, cfg.ingest.ground_classes)
    emap.release_buckets()
    t1 = time.perf_counter()
    feats = compute_features(emap, cfg.neighborhood)
    mask = compute_step_mask(feats, emap, cfg.vehicle, semantic,
                             ground_classes=cfg.ingest.ground_classes,
                             trench_search_radius=cfg.annotate.trench_search,
                             overhang_margin=cfg.annotate.overhang_margin)
    t2 = time.perf_counter()
    cost = map_semantics_to_cost(semantic, cfg.cost_table)
    cost = apply_step_mask(cost, mask, emap, cfg.annotate.ground_band)
    if camera is not None and cfg.annotate.fov_mask:
        semantic = fov_mask(semantic, camera)
        cost = fov_mask(cost, camera)
    t3 = time.perf_counter()
    manifest = {
        "num_points": len(cloud),
        "mask": mask.stats(),
        "timing_s": {"voxelize": t1 - t0, "features_and_mask": t2 - t1, "cost": t3 - t2},
    }
    return AnnotationResult(semantic, cost, emap, feats, mask, manifest)


def annotate_sequence(seq_dir: str | Path, cfg: PipelineConfig, key: int,
                      frames: tuple[int, int] | None = None, *, threads: int = 1,
                      invert_poses: bool | None = None) -> AnnotationResult:
    t0 = time.perf_counter()
    seq = scan_sequence(seq_dir)
    invert = cfg.ingest.invert_poses if invert_poses is None else invert_poses
    poses = load_poses(seq.poses_path, invert=invert)
    if len(poses) < len(seq.cloud_files):
        raise PoseError(f"{seq.poses_path}: {len(poses)} poses for {len(seq.cloud_files)} frames")
    start, end = resolve_window(len(seq.cloud_files), key, cfg.ingest.window, frames)
    ids = list(range(start, end))
    loaded = load_frames(seq, ids, threads=threads, id_map=cfg.ingest.resolved_id_map(),
                         strict=cfg.ingest.strict_labels)
    cloud = aggregate_frames(loaded, [poses[i] for i in ids], key - start)
    camera = load_calibration(seq.calib_path) if seq.calib_path is not None else None
    t1 = time.perf_counter()
    result = annotate_cloud(cloud, cfg, camera)
    result.manifest = {
        "sequence": str(Path(seq_dir)),
        "key_frame": key,
        "frame_window": [start, end],
        "fov_masked": camera is not None and cfg.annotate.fov_mask,
        **result.manifest,
    }
    result.manifest["timing_s"] = {"load": t1 - t0, **result.manifest["timing_s"]}
    return result
