"""Two-channel cell segmentation and classification on a small numpy autodiff engine."""

from .errors import ConfigError, ContractError, DimensionError, FormatError, GenerationError, NeurocellError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "FormatError",
    "GenerationError",
    "NeurocellError",
]
