"""Pixel-wise building segmentation from aerial imagery and LiDAR grids.

Tree ensembles (bagged forest, level-wise boosting, leaf-wise histogram
boosting) classify one pixel at a time; predictions are reassembled into
masks and scored with IoU and boundary IoU.
"""

from mapseg.errors import ConfigError, DataError, MapsegError, TrainingDivergence

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "MapsegError", "TrainingDivergence", "__version__"]
