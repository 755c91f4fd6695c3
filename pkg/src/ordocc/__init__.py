"""Dense traversability-cost occupancy grids from semantically labeled LiDAR."""

from .grid import CostLabel, GridConfig, LabelSpace, SemanticLabel, VoxelGrid

__all__ = ["CostLabel", "GridConfig", "LabelSpace", "SemanticLabel", "VoxelGrid"]
__version__ = "0.1.0"
