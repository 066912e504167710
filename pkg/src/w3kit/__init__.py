"""w3kit: W3 attention, CtxtNet context modelling, fusion metrics and a synthetic toy harness."""
from .ctxtnet import CtxtNet
from .errors import ConfigError, ShapeMismatchError, TrainingDiverged, W3KitError
from .w3 import W3Attention

__version__ = "0.1.0"

__all__ = ["CtxtNet", "W3Attention", "ConfigError", "ShapeMismatchError", "TrainingDiverged", "W3KitError"]
