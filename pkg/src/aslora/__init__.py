"""Low-rank adapters with one shared down-projection and adaptively merged up-projections."""
from .adapters import AdapterConfig, trainable_param_count
from .config import load_config, materialize
from .train import build_trainer, run

__version__ = "0.1.0"

__all__ = ["AdapterConfig", "build_trainer", "load_config", "materialize", "run", "trainable_param_count"]
