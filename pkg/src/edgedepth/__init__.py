"""Dense edge-constrained monocular depth candidates with graph-matching weighting."""

from . import dgde, errors, fusion, geometry, gmw, harness, synth, tinynn
from ._backend import backend_name

__version__ = "0.1.0"

__all__ = [
    "backend_name",
    "dgde",
    "errors",
    "fusion",
    "geometry",
    "gmw",
    "harness",
    "synth",
    "tinynn",
    "__version__",
]
