"""Adversarial domain adaptation for multi-class cardiac MR segmentation."""

__version__ = "0.1.0"

from .types import (CLASS_NAMES, NUM_CLASSES, ClassMask, ConfigError, Domain, GrayImage,
                    InvalidInputError, LossWeights, argmax_decode, one_hot)

__all__ = [
    "CLASS_NAMES", "NUM_CLASSES", "ClassMask", "ConfigError", "Domain", "GrayImage",
    "InvalidInputError", "LossWeights", "argmax_decode", "one_hot",
]
