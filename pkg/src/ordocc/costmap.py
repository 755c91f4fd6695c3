"""Semantic-to-cost mapping and the Step Mask lethal override."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .geomfeat import ElevationMap
from .grid import CostLabel, LabelSpace, SemanticLabel, VoxelGrid, cost_from_name, semantic_from_name
from .mobility import StepMask

DEFAULT_COST_TABLE: dict[SemanticLabel, CostLabel] = {
    SemanticLabel.HARD_SURFACE: CostLabel.FREE,
    SemanticLabel.GRASS: CostLabel.FREE,
    SemanticLabel.MUD: CostLabel.LOW_COST,
    SemanticLabel.BUSH: CostLabel.MEDIUM_COST,
    SemanticLabel.RUBBLE: CostLabel.MEDIUM_COST,
    SemanticLabel.TREE: CostLabel.LETHAL,
    SemanticLabel.OBJECT: CostLabel.LETHAL,
    SemanticLabel.PERSON: CostLabel.LETHAL,
    SemanticLabel.WATER: CostLabel.LETHAL,
}

DEFAULT_GROUND_BAND = 1.0


class CostTableError(ValueError):
    pass


class CostMappingTable:
    """Total map from semantic labels to cost labels.

    void -> empty and unknown -> unknown are fixed and cannot be overridden.
    """

    def __init__(self, table: Mapping[SemanticLabel, CostLabel] | None = None):
        table = dict(DEFAULT_COST_TABLE if table is None else table)
        for fixed in (SemanticLabel.VOID, SemanticLabel.UNKNOWN):
            if fixed in table:
                raise CostTableError(f"{fixed.label_name} has a fixed cost and cannot be remapped")
        missing = [s.label_name for s in SemanticLabel
                   if s not in (SemanticLabel.VOID, SemanticLabel.UNKNOWN) and s not in table]
        if missing:
            raise CostTableError(f"cost table is missing entries for {missing}")
        for s, c in table.items():
            if c in (CostLabel.EMPTY, CostLabel.UNKNOWN):
                raise CostTableError(f"{SemanticLabel(s).label_name} cannot map to {CostLabel(c).label_name}")
        self.table = {SemanticLabel(k): CostLabel(v) for k, v in table.items()}
        self.table[SemanticLabel.VOID] = CostLabel.EMPTY
        self.table[SemanticLabel.UNKNOWN] = CostLabel.UNKNOWN

    def lookup(self) -> np.ndarray:
        lut = np.zeros(256, dtype=np.uint8)
        for s, c in self.table.items():
            lut[int(s)] = int(c)
        return lut

    def to_json(self) -> dict:
        return {s.label_name: c.label_name for s, c in self.table.items()
                if s not in (SemanticLabel.VOID, SemanticLabel.UNKNOWN)}

    @classmethod
    def from_json(cls, d: Mapping[str, str]) -> "CostMappingTable":
        try:
            table = {semantic_from_name(k): cost_from_name(v) for k, v in d.items()}
        except ValueError as exc:
            raise CostTableError(str(exc)) from None
        return cls(table)

    @classmethod
    def load(cls, path: str | Path) -> "CostMappingTable":
        return cls.from_json(json.loads(Path(path).read_text()))

    def __eq__(self, other) -> bool:
        return isinstance(other, CostMappingTable) and self.table == other.table


def map_semantics_to_cost(g: VoxelGrid, table: CostMappingTable | None = None) -> VoxelGrid:
    if g.space is not LabelSpace.SEMANTIC:
        raise ValueError("expected a semantic grid")
    table = table or CostMappingTable()
    return VoxelGrid(g.config, table.lookup()[g.labels], LabelSpace.COST)


def apply_step_mask(g: VoxelGrid, mask: StepMask, emap: ElevationMap,
                    ground_band: float = DEFAULT_GROUND_BAND) -> VoxelGrid:
    """Mark occupied voxels near the ground of every masked column lethal.

    The band spans from one voxel below the column's ground elevation to
    ``ground_band`` above it (voxel centers, inclusive).
    """
    if g.space is not LabelSpace.COST:
        raise ValueError("expected a cost grid")
    cfg = g.config
    if mask.shape != cfg.dims[:2] or emap.shape != cfg.dims[:2]:
        raise ValueError(f"mask {mask.shape} / map {emap.shape} do not match grid lattice {cfg.dims[:2]}")
    out = g.labels.copy()
    vol = out.reshape(cfg.dims)
    cols = mask.mask & emap.valid
    if cols.any():
        zc = cfg.origin[2] + (np.arange(cfg.dims[2]) + 0.5) * cfg.voxel_size
        elev = emap.elevation[cols][:, None]
        band = (zc[None, :] >= elev - cfg.voxel_size) & (zc[None, :] <= elev + ground_band)
        sub = vol[cols]
        hit = band & (sub != CostLabel.EMPTY) & (sub != CostLabel.UNKNOWN)
        sub[hit] = CostLabel.LETHAL
        vol[cols] = sub
    return VoxelGrid(cfg, out, LabelSpace.COST, g.names)
