"""pgfusion: panoptic-guided multi-view feature fusion and center-based 3D
detection on synthetic LiDAR scenes, with a compiled kernel core and a NumPy
fallback."""

__version__ = "0.1.0"

from pgfusion.backend import BACKEND_NAME, COMPILED

__all__ = ["BACKEND_NAME", "COMPILED", "__version__"]
