"""Synthetic labeled scenes with analytically known traversability, written in
the on-disk sequence layout the CLI consumes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridConfig, SemanticLabel
from .ingest import CameraModel, PointCloudFrame, Pose

FORWARD_CAMERA_ROTATION = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def forward_camera(fx: float = 400.0, width: int = 1280, height: int = 720) -> CameraModel:
    """Pinhole camera at the ego origin looking along +x."""
    return CameraModel(fx, fx, width / 2, height / 2, width, height,
                       Pose(FORWARD_CAMERA_ROTATION, np.zeros(3)))


def yaw_pose(x: float, y: float, yaw_deg: float) -> Pose:
    c, s = math.cos(math.radians(yaw_deg)), math.sin(math.radians(yaw_deg))
    return Pose(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), np.array([x, y, 0.0]))


def write_sequence(root: str | Path, world_frames: list[PointCloudFrame], poses: list[Pose],
                   camera: CameraModel | None = None) -> Path:
    """Store world-frame clouds as sensor-frame files plus poses and calibration."""
    root = Path(root)
    (root / "velodyne").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (frame, pose) in enumerate(zip(world_frames, poses)):
        local = PointCloudFrame(pose.inverse().apply(frame.xyz), frame.intensity, frame.labels, i)
        cloud, labels = local.to_bytes()
        (root / "velodyne" / f"{i:06d}.bin").write_bytes(cloud)
        (root / "labels" / f"{i:06d}.label").write_bytes(labels)
        lines.append(" ".join(repr(float(v)) for v in pose.matrix()[:3].ravel()))
    (root / "poses.txt").write_text("\n".join(lines) + "\n")
    if camera is not None:
        (root / "calib.json").write_text(json.dumps(camera.to_dict(), indent=2))
    return root


def _lattice(x0: float, x1: float, y0: float, y1: float, step: float) -> np.ndarray:
    xs = np.arange(x0 + step / 2, x1, step)
    ys = np.arange(y0 + step / 2, y1, step)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass
class WallScene:
    """Flat grass field with a rubble wall and an overhanging bar.

    Footprints are axis-aligned boxes ``(x0, x1, y0, y1)`` in the key frame.
    """

    grid: GridConfig = field(default_factory=lambda: GridConfig((0.0, -9.6, -2.0), (96, 96, 40), 0.2))
    wall: tuple[float, float, float, float] = (8.0, 8.6, -6.0, -2.0)
    wall_height: float = 1.0
    bar: tuple[float, float, float, float] = (14.0, 14.4, -9.6, 9.6)
    bar_height: float = 1.5
    n_frames: int = 3
    spacing: float = 0.1

    def world_cloud(self) -> PointCloudFrame:
        g = self.grid
        x0, y0 = g.origin[0], g.origin[1]
        x1, y1 = g.upper[0], g.upper[1]
        s = self.spacing
        ground = _lattice(x0, x1, y0, y1, s)
        wx0, wx1, wy0, wy1 = self.wall
        in_wall = (ground[:, 0] >= wx0) & (ground[:, 0] < wx1) & (ground[:, 1] >= wy0) & (ground[:, 1] < wy1)
        grass = np.column_stack([ground[~in_wall], np.zeros((~in_wall).sum())])
        wall_xy = ground[in_wall]
        levels = np.append(np.arange(s / 2, self.wall_height, s), self.wall_height)
        wall = np.column_stack([np.repeat(wall_xy, levels.size, axis=0), np.tile(levels, len(wall_xy))])
        bx0, bx1, by0, by1 = self.bar
        bar_xy = _lattice(bx0, bx1, by0, by1, s)
        bar = np.column_stack([bar_xy, np.full(len(bar_xy), self.bar_height + s / 2)])
        xyz = np.concatenate([grass, wall, bar])
        labels = np.concatenate([
            np.full(len(grass), SemanticLabel.GRASS),
            np.full(len(wall), SemanticLabel.RUBBLE),
            np.full(len(bar), SemanticLabel.OBJECT),
        ]).astype(np.uint8)
        return PointCloudFrame.from_points(xyz, labels)

    def poses(self) -> list[Pose]:
        return [yaw_pose(1.5 * i, 0.2 * i, 4.0 * i) for i in range(self.n_frames)]

    def write(self, root: str | Path) -> Path:
        cloud = self.world_cloud()
        poses = self.poses()
        # every frame observes the whole scene; key frame 0 coincides with the world
        return write_sequence(root, [cloud] * self.n_frames, poses, forward_camera())

    def config_json(self, lidar_height: float = 2.0) -> dict:
        g = self.grid
        return {
            "grid": g.to_dict(),
            "vehicle": {"wheel_radius_m": 0.4, "wheelbase_m": 2.0, "cg_front_dist_m": 1.0,
                        "friction": 0.6, "lidar_height_m": lidar_height, "max_climb_deg": 30.0},
            "ingest": {"window": self.n_frames},
        }

    # analytic ground truth, in (i, j) ground cells of the key frame

    def _cells_in(self, box) -> set[tuple[int, int]]:
        g = self.grid
        bx0, bx1, by0, by1 = box
        out = set()
        for i in range(g.dims[0]):
            cx = g.origin[0] + (i + 0.5) * g.voxel_size
            if not bx0 <= cx < bx1:
                continue
            for j in range(g.dims[1]):
                cy = g.origin[1] + (j + 0.5) * g.voxel_size
                if by0 <= cy < by1:
                    out.add((i, j))
        return out

    def wall_cells(self) -> set[tuple[int, int]]:
        return self._cells_in(self.wall)

    def corridor_cells(self) -> set[tuple[int, int]]:
        return self._cells_in(self.bar)

    def _near_wall(self, radius: float) -> set[tuple[int, int]]:
        vs = self.grid.voxel_size
        wall = self.wall_cells()
        out = set()
        nx, ny = self.grid.dims[:2]
        for i in range(nx):
            for j in range(ny):
                if (i, j) in wall:
                    continue
                if any(((i - a) ** 2 + (j - b) ** 2) * vs * vs <= radius * radius * (1 + 1e-9) for a, b in wall):
                    out.add((i, j))
        return out

    def wall_adjacent_cells(self, radius: float) -> set[tuple[int, int]]:
        """Grass cells whose neighborhood reaches a wall cell."""
        return self._near_wall(radius)

    def open_cells(self, radius: float) -> set[tuple[int, int]]:
        """Grass cells whose neighborhood touches neither the wall nor the bar corridor."""
        nx, ny = self.grid.dims[:2]
        vs = self.grid.voxel_size
        blocked = self.wall_cells() | self._near_wall(radius + vs) | self.corridor_cells()
        return {(i, j) for i in range(nx) for j in range(ny) if (i, j) not in blocked}

    def ground_voxel_z(self) -> int:
        g = self.grid
        return int(math.floor((0.0 - g.origin[2]) / g.voxel_size))


def random_scene(n_frames: int, points_per_frame: int, seed: int = 0,
                 grid: GridConfig | None = None) -> tuple[list[PointCloudFrame], list[Pose]]:
    """Bumpy ground with scattered vegetation; frames drift forward 0.5 m each."""
    rng = np.random.default_rng(seed)
    grid = grid or GridConfig()
    frames, poses = [], []
    lo, hi = np.asarray(grid.origin), grid.upper
    ground_labels = np.array([SemanticLabel.GRASS, SemanticLabel.HARD_SURFACE, SemanticLabel.MUD], dtype=np.uint8)
    other_labels = np.array([SemanticLabel.TREE, SemanticLabel.BUSH, SemanticLabel.OBJECT,
                             SemanticLabel.VOID], dtype=np.uint8)
    for f in range(n_frames):
        n_ground = int(points_per_frame * 0.7)
        n_other = points_per_frame - n_ground
        xy = rng.uniform(lo[:2], hi[:2], size=(n_ground, 2))
        z = 0.15 * np.sin(0.3 * xy[:, 0]) * np.cos(0.2 * xy[:, 1]) + rng.normal(0, 0.02, n_ground)
        g = np.column_stack([xy, z])
        oxy = rng.uniform(lo[:2], hi[:2], size=(n_other, 2))
        oz = rng.uniform(0.0, 4.0, n_other)
        o = np.column_stack([oxy, oz])
        xyz = np.concatenate([g, o])
        labels = np.concatenate([rng.choice(ground_labels, n_ground), rng.choice(other_labels, n_other)])
        pose = yaw_pose(0.5 * f, 0.0, 0.0)
        frames.append(PointCloudFrame.from_points(xyz, labels, rng.uniform(0, 1, len(xyz))))
        poses.append(pose)
    return frames, poses
