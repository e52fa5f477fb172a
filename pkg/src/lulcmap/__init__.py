"""lulcmap: land-use/land-cover scene classification and mapping.

A self-contained engine built on a minimal reverse-mode autodiff tensor
library: a Vision Transformer classifier, its training recipe (Adam,
gradient clipping, augmentation, early stopping), an evaluation harness,
checkpoint serialization, and a geospatial pipeline that tiles a
georeferenced raster, classifies the tiles, and renders an LULC map.
"""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: F401
