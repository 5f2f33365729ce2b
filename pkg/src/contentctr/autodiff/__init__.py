from . import ops
from .gradcheck import ProbeError, analytic_grad, grad_check, numeric_grad, relative_error
from .ops import *  # noqa: F401,F403
from .optim import AdamState, adam_step
from .tensor import (
    DegenerateRowError,
    DimensionError,
    RankError,
    Tape,
    Tensor,
    active_tape,
    constant,
    parameter,
    record_op,
)


def backward(loss, params=None):
    """Backward pass on the tape that produced ``loss``."""
    tape = loss._tape if loss._tape is not None else Tape()
    return tape.backward(loss, params)
