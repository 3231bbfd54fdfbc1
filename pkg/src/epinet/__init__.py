"""Epitomic convolution, patchwork MIL and sliding-window detection on numpy."""

from .errors import (CheckpointError, ConfigError, ContractError, DimensionError, DTypeError,
                     EpinetError, NonFiniteError, PackingError, RangeError)
from .net import Network, TrainConfig, Trainer, class_t, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
