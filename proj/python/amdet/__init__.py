"""Toy text encoders, textual backdoor injection and assimilation-based detection."""
from ._amdet import (
    AmdetError,
    EncoderConfig,
    EncoderModel,
    asr,
    landscape,
    random_target,
    scan,
    tokenize,
    train_backdoor,
    train_benign,
    utility,
)

__all__ = [
    "AmdetError",
    "EncoderConfig",
    "EncoderModel",
    "asr",
    "landscape",
    "random_target",
    "scan",
    "tokenize",
    "train_backdoor",
    "train_benign",
    "utility",
]
