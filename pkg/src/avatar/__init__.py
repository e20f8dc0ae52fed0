"""AVATAR: adversarial autoencoder with a supervisor and distribution loss for time-series generation.

Everything runs on a small numpy reverse-mode autodiff engine
(:mod:`avatar.autodiff`), so training and evaluation are deterministic
functions of their inputs and seed.
"""

from .autodiff import Adam, SeededRng, Tensor
from .data import generate_sines, load_csv, minmax_normalize, slice_windows
from .nets import AvatarModel, init_model
from .synthesis import generate
from .training import TrainConfig, Trainer, train

__all__ = [
    "Adam",
    "AvatarModel",
    "SeededRng",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "generate",
    "generate_sines",
    "init_model",
    "load_csv",
    "minmax_normalize",
    "slice_windows",
    "train",
]

__version__ = "0.1.0"
