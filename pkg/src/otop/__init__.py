"""Water extraction with a multi-scale CNN, its lowering to raster-operator graphs, and baselines."""

from .kernels import BACKEND
from .raster import BandSemantics, Raster, TilePair, read_raster, write_raster

__version__ = "0.1.0"

__all__ = ["BACKEND", "BandSemantics", "Raster", "TilePair", "read_raster", "write_raster",
           "__version__"]
