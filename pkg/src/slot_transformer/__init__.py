"""Slot-structured iterative variational video model on a synthetic sprite world."""
from .config import Config, ConfigError, preset
from .heads import SlotTransformer

__version__ = "0.1.0"
__all__ = ["Config", "ConfigError", "SlotTransformer", "preset", "__version__"]
