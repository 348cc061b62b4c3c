"""Three-stage cascade: heads, sample assignment, losses and training."""

from .config import CascadeConfig, desk_config, tiny_config
from .model import init_params
from .train import Routing, cascade_losses, train, train_step

__all__ = ["CascadeConfig", "Routing", "cascade_losses", "desk_config", "init_params", "tiny_config", "train", "train_step"]
