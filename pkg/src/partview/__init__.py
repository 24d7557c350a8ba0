"""Fine-grained multi-view 3D shape classification toolkit.

A desk-scale pipeline: procedural part-labeled meshes, software multi-view
rendering, class-agnostic part detection with a region-proposal head, and
hierarchical part/view bilinear attention feeding a GRU-enhanced classifier,
all differentiated by the package's own reverse-mode tensor engine.
"""

__version__ = "0.1.0"
