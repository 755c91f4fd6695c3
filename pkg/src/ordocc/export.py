"""Colored PLY export of voxel grids for offline viewing."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .grid import CostLabel, LabelSpace, SemanticLabel, VoxelGrid, index_to_center_array, unflatten_index
from .io_util import atomic_write_bytes

# Arbitrary but fixed colors, one per label.
SEMANTIC_PALETTE = {
    SemanticLabel.VOID: (0, 0, 0),
    SemanticLabel.GRASS: (0, 102, 0),
    SemanticLabel.TREE: (0, 255, 0),
    SemanticLabel.HARD_SURFACE: (170, 170, 170),
    SemanticLabel.OBJECT: (255, 255, 0),
    SemanticLabel.BUSH: (255, 0, 127),
    SemanticLabel.WATER: (0, 128, 255),
    SemanticLabel.PERSON: (204, 153, 255),
    SemanticLabel.MUD: (139, 69, 19),
    SemanticLabel.RUBBLE: (255, 153, 0),
    SemanticLabel.UNKNOWN: (40, 40, 40),
}
COST_PALETTE = {
    CostLabel.EMPTY: (0, 0, 0),
    CostLabel.FREE: (0, 200, 0),
    CostLabel.LOW_COST: (255, 255, 0),
    CostLabel.MEDIUM_COST: (255, 140, 0),
    CostLabel.LETHAL: (220, 0, 0),
    CostLabel.UNKNOWN: (40, 40, 40),
}


def default_palette(space: LabelSpace) -> dict[int, tuple[int, int, int]]:
    pal = SEMANTIC_PALETTE if space is LabelSpace.SEMANTIC else COST_PALETTE
    return {int(k): v for k, v in pal.items()}


def load_palette(path: str | Path, space: LabelSpace) -> dict[int, tuple[int, int, int]]:
    """JSON object of label name (or id) -> [r, g, b]; unlisted labels keep defaults."""
    pal = default_palette(space)
    names = {v: k for k, v in space.names().items()}
    for key, rgb in json.loads(Path(path).read_text()).items():
        lid = int(key) if key.isdigit() else names.get(key.strip().lower())
        if lid is None:
            raise ValueError(f"palette names unknown label {key!r}")
        if len(rgb) != 3 or not all(0 <= int(c) <= 255 for c in rgb):
            raise ValueError(f"palette entry for {key!r} is not an RGB triple")
        pal[lid] = tuple(int(c) for c in rgb)
    return pal


def grid_points(grid: VoxelGrid, include_unknown: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Centers and labels of non-empty voxels, in linear order."""
    keep = grid.labels != 0
    if not include_unknown:
        keep &= grid.labels != grid.space.unknown
    flat = np.flatnonzero(keep)
    return index_to_center_array(unflatten_index(flat, grid.config), grid.config), grid.labels[flat]


def encode_ply(grid: VoxelGrid, palette=None, binary: bool = False, include_unknown: bool = False) -> bytes:
    palette = palette or default_palette(grid.space)
    xyz, labels = grid_points(grid, include_unknown)
    lut = np.zeros((256, 3), dtype=np.uint8)
    for k, rgb in palette.items():
        lut[int(k)] = rgb
    rgb = lut[labels]
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(labels)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "property uchar label\n"
        "end_header\n"
    ).encode("ascii")
    if binary:
        rec = np.empty(len(labels), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                           ("r", "u1"), ("g", "u1"), ("b", "u1"), ("label", "u1")])
        rec["x"], rec["y"], rec["z"] = xyz.T
        rec["r"], rec["g"], rec["b"] = rgb.T
        rec["label"] = labels
        return header + rec.tobytes()
    lines = [f"{x:.4f} {y:.4f} {z:.4f} {r} {g} {b} {lab}"
             for (x, y, z), (r, g, b), lab in zip(xyz.tolist(), rgb.tolist(), labels.tolist())]
    body = ("\n".join(lines) + "\n") if lines else ""
    return header + body.encode("ascii")


def export_ply(grid: VoxelGrid, path: str | Path, palette=None, binary: bool = False) -> int:
    data = encode_ply(grid, palette, binary)
    atomic_write_bytes(path, data)
    return int(np.count_nonzero((grid.labels != 0) & (grid.labels != grid.space.unknown)))


def read_ply_vertices(data: bytes) -> np.ndarray:
    """Parse the vertex block written by :func:`encode_ply` (x, y, z, r, g, b, label)."""
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    n = int(next(l.split()[2] for l in header if l.startswith("element vertex")))
    if "format binary_little_endian 1.0" in header:
        rec = np.frombuffer(data[end:], dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                               ("r", "u1"), ("g", "u1"), ("b", "u1"), ("label", "u1")], count=n)
        return np.column_stack([rec[f].astype(float) for f in rec.dtype.names])
    rows = data[end:].decode("ascii").split("\n")[:n]
    return np.array([[float(v) for v in r.split()] for r in rows]).reshape(n, 7)
