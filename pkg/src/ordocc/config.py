"""Pipeline configuration: one JSON document covering every stage."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .bki import BkiConfig
from .costmap import DEFAULT_GROUND_BAND, CostMappingTable
from .geomfeat import DEFAULT_GROUND_CLASSES, NeighborhoodSpec
from .grid import GridConfig, SemanticLabel, semantic_from_name
from .ingest import IDENTITY_ID_MAP, RELLIS3D_ID_MAP
from .mobility import VehicleParams

NAMED_ID_MAPS = {"identity": IDENTITY_ID_MAP, "rellis3d": RELLIS3D_ID_MAP}

_SECTIONS = {
    "grid": {"origin", "dims", "voxel_size"},
    "neighborhood": {"radius_m", "min_valid_cells"},
    "vehicle": {"wheel_radius_m", "wheelbase_m", "cg_front_dist_m", "friction", "lidar_height_m", "max_climb_deg"},
    "cost_table": None,
    "bki": {"S", "prior_alpha", "support_radius_m", "k", "occupancy_threshold", "mode"},
    "ingest": {"window", "invert_poses", "ground_classes", "id_map", "strict_labels"},
    "annotate": {"ground_band_m", "trench_search_m", "overhang_margin_m", "fov_mask"},
}


class ConfigError(ValueError):
    pass


@dataclass
class IngestOptions:
    window: int = 30
    invert_poses: bool = False
    ground_classes: frozenset = DEFAULT_GROUND_CLASSES
    id_map: str | dict = "identity"
    strict_labels: bool = False

    def resolved_id_map(self) -> dict[int, int]:
        if isinstance(self.id_map, str):
            return NAMED_ID_MAPS[self.id_map]
        return {int(k): int(v) for k, v in self.id_map.items()}


@dataclass
class AnnotateOptions:
    ground_band: float = DEFAULT_GROUND_BAND
    trench_search: float = 2.0
    overhang_margin: float = 0.0
    fov_mask: bool = True


@dataclass
class PipelineConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    neighborhood: NeighborhoodSpec = field(default_factory=NeighborhoodSpec)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    cost_table: CostMappingTable = field(default_factory=CostMappingTable)
    bki: BkiConfig = field(default_factory=BkiConfig)
    ingest: IngestOptions = field(default_factory=IngestOptions)
    annotate: AnnotateOptions = field(default_factory=AnnotateOptions)

    def to_json(self) -> dict:
        id_map = self.ingest.id_map
        return {
            "grid": self.grid.to_dict(),
            "neighborhood": {"radius_m": self.neighborhood.radius,
                             "min_valid_cells": self.neighborhood.min_valid_cells},
            "vehicle": self.vehicle.to_json(),
            "cost_table": self.cost_table.to_json(),
            "bki": self.bki.to_json(),
            "ingest": {
                "window": self.ingest.window,
                "invert_poses": self.ingest.invert_poses,
                "ground_classes": sorted(SemanticLabel(c).label_name for c in self.ingest.ground_classes),
                "id_map": id_map if isinstance(id_map, str) else {str(k): v for k, v in sorted(id_map.items())},
                "strict_labels": self.ingest.strict_labels,
            },
            "annotate": {
                "ground_band_m": self.annotate.ground_band,
                "trench_search_m": self.annotate.trench_search,
                "overhang_margin_m": self.annotate.overhang_margin,
                "fov_mask": self.annotate.fov_mask,
            },
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "PipelineConfig":
        """Build and validate; any violation raises ConfigError and nothing is kept."""
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(d) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown configuration sections: {sorted(unknown)}")
        for name, keys in _SECTIONS.items():
            sec = d.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"section '{name}' must be an object")
            if keys is not None and set(sec) - keys:
                raise ConfigError(f"unknown keys in '{name}': {sorted(set(sec) - keys)}")
        try:
            defaults = GridConfig()
            g = d.get("grid", {})
            grid = GridConfig(origin=tuple(g.get("origin", defaults.origin)),
                              dims=tuple(g.get("dims", defaults.dims)),
                              voxel_size=float(g.get("voxel_size", defaults.voxel_size)))
            n = d.get("neighborhood", {})
            nb = NeighborhoodSpec(radius=float(n.get("radius_m", 0.6)),
                                  min_valid_cells=int(n.get("min_valid_cells", 3)))
            nb.offsets(grid.voxel_size)
            vehicle = VehicleParams.from_json(d.get("vehicle", {}))
            table = CostMappingTable.from_json(d["cost_table"]) if "cost_table" in d else CostMappingTable()
            bk = BkiConfig.from_json(d.get("bki", {}))
            i = d.get("ingest", {})
            id_map = i.get("id_map", "identity")
            if isinstance(id_map, str) and id_map not in NAMED_ID_MAPS:
                raise ConfigError(f"unknown id_map {id_map!r}; use {sorted(NAMED_ID_MAPS)} or an object")
            if isinstance(id_map, dict):
                id_map = {int(k): int(semantic_from_name(v) if isinstance(v, str) else SemanticLabel(v))
                          for k, v in id_map.items()}
            ground = i.get("ground_classes")
            ingest = IngestOptions(
                window=int(i.get("window", 30)),
                invert_poses=bool(i.get("invert_poses", False)),
                ground_classes=(DEFAULT_GROUND_CLASSES if ground is None
                                else frozenset(semantic_from_name(x) for x in ground)),
                id_map=id_map,
                strict_labels=bool(i.get("strict_labels", False)),
            )
            if ingest.window < 1:
                raise ConfigError("ingest.window must be >= 1")
            a = d.get("annotate", {})
            ann = AnnotateOptions(ground_band=float(a.get("ground_band_m", DEFAULT_GROUND_BAND)),
                                  trench_search=float(a.get("trench_search_m", 2.0)),
                                  overhang_margin=float(a.get("overhang_margin_m", 0.0)),
                                  fov_mask=bool(a.get("fov_mask", True)))
            if not (ann.ground_band >= 0 and ann.trench_search > 0 and math.isfinite(ann.overhang_margin)):
                raise ConfigError("annotate options out of range")
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(grid, nb, vehicle, table, bk, ingest, ann)

    @classmethod
    def load(cls, path: str | Path | None) -> "PipelineConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_json(data)
