"""Semi-supervised segmentation with mutual knowledge distillation between two
student/teacher branches."""

from .core import IGNORE, AugConfig, ConfigError, TrainConfig, ValidationError, one_hot, validate_config
from .model import ArchConfig, SegNet, init_model

__all__ = ["IGNORE", "ArchConfig", "AugConfig", "ConfigError", "SegNet", "TrainConfig",
           "ValidationError", "init_model", "one_hot", "validate_config"]
