"""Multi-channel speech separation with learnable spatial features."""
from .config import RunConfig, load_config, load_preset
from .errors import ConfigError, DataError, NumericalError, SpatialSepError
from .model import SeparationModel
from .signal import MultiChannelSignal

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "MultiChannelSignal", "NumericalError", "RunConfig",
    "SeparationModel", "SpatialSepError", "load_config", "load_preset", "__version__",
]
