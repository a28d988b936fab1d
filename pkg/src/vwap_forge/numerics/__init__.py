from . import tape
from .adam import AdamState, adam_step
from .grad import bind, finite_diff_grad, forward, forward_backward, max_relative_error
from .params import CheckpointError, ParamStore, load_checkpoint, save_checkpoint
from .tape import NonFiniteError, ShapeError, Var

__all__ = [
    "AdamState",
    "CheckpointError",
    "NonFiniteError",
    "ParamStore",
    "ShapeError",
    "Var",
    "adam_step",
    "bind",
    "finite_diff_grad",
    "forward",
    "forward_backward",
    "load_checkpoint",
    "max_relative_error",
    "save_checkpoint",
    "tape",
]
