from . import autodiff as ad
from .autodiff import ShapeError, Tape, TapeError, Tensor, backward
from .optim import AdamState, NonFiniteGradient, PlateauSchedule, adam_step, plateau_update
from .rng import RngStream, sample_normal

__all__ = [
    "ad", "Tensor", "Tape", "TapeError", "ShapeError", "backward",
    "AdamState", "adam_step", "PlateauSchedule", "plateau_update", "NonFiniteGradient",
    "RngStream", "sample_normal",
]
