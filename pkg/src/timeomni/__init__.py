"""TimeOmni: a patch-routed series encoder reprogrammed into a small causal
language model, with text and regression heads, plus a benchmark harness."""

from .model import ModelConfig, TimeOmni
from .training import TrainConfig, train

__all__ = ["ModelConfig", "TimeOmni", "TrainConfig", "train"]
__version__ = "0.1.0"
