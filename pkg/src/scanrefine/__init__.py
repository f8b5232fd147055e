"""Cross-frame refinement of per-point LiDAR segmentation scores.

Modules: ``frame_io`` (SemanticKITTI files and poses), ``knn`` (exact
nearest-neighbour search), ``fusion`` (fused feature rows), ``refiner`` (the
MLP, its training and model files), ``metrics`` (IoU), ``synth`` (synthetic
sequences and oracle scores) and ``cli``.
"""

from .errors import ScanRefineError

__version__ = "0.1.0"

__all__ = ["ScanRefineError", "__version__"]
