from . import autodiff
from .autodiff import NonFiniteError, Tape, Tensor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import OptimizerState, adam_step, sgd_step, step
from .params import Gradient, Layout, LayoutMismatchError, ParamVector, mean_of


def backprop(loss_fn, params):
    """Value and exact gradient of ``loss_fn(tensors)`` at ``params``.

    ``loss_fn`` receives a name -> leaf tensor mapping for the segments of
    ``params`` and must return a scalar :class:`Tensor`.
    """
    with Tape() as tape:
        leaves = {name: tape.watch(seg, name) for name, seg in params.segments().items()}
        loss = loss_fn(leaves)
        grads = tape.gradient(loss, list(leaves.values()))
    return float(loss.value), params.flat_from_segments(dict(zip(leaves, grads)))


__all__ = [
    "autodiff", "NonFiniteError", "Tape", "Tensor", "CheckpointError", "load_checkpoint",
    "save_checkpoint", "OptimizerState", "adam_step", "sgd_step", "step", "Gradient", "Layout",
    "LayoutMismatchError", "ParamVector", "mean_of", "backprop",
]
