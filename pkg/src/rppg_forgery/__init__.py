"""Face-forgery source categorization from rPPG spatial-temporal maps.

Subpackages and modules:

- ``ndcore``: float64 reverse-mode autodiff (conv, pooling, LSTM, Pearson).
- ``stmap``: ROI traces to subset-mean spatial-temporal maps, plus file formats.
- ``augment``: convex blending of map groups within / across sources.
- ``model``: filtering and interaction networks, losses, checkpoints.
- ``synth``: deterministic multi-source synthetic traces.
- ``train`` / ``evaluation``: SGD loop and video-level aggregation.
- ``cli``: the ``rppg-forgery`` command line.
"""
from .errors import ConfigurationError, ContractError, FormatError

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "ContractError", "FormatError", "__version__"]
