"""Single-utterance test-time adaptation for sequence models via beam-search
logit acquisition, generalized entropy minimization, and negative sampling."""

from .core import (AdaptationConfig, ConfigError, Hypothesis, LogitMatrix, Utterance, Vocabulary,
                   load_config, save_config, validate_config)

__all__ = [
    "AdaptationConfig", "ConfigError", "Hypothesis", "LogitMatrix", "Utterance", "Vocabulary",
    "load_config", "save_config", "validate_config",
]

__version__ = "0.1.0"
