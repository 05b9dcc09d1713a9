"""Tiled TILs scoring for whole-slide rasters, with the matching evaluation metrics."""
from .errors import TilscopeError, ValidationError
from .raster import Raster, Resolution, load_raster, save_raster

__version__ = "0.1.0"

__all__ = [
    "Raster",
    "Resolution",
    "TilscopeError",
    "ValidationError",
    "load_raster",
    "save_raster",
    "__version__",
]
