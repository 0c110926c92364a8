"""A small numpy convolutional network: layers, training, dense application."""
from .dense import dense_apply
from .layers import LayerSpec, format_stack, parse_stack
from .net import (
    ConvNet,
    backward,
    default_stack,
    forward,
    infer,
    init_net,
    load_net,
    mse_loss,
    save_net,
    with_output_units,
)
from .training import (
    ArrayPatchData,
    CurveRow,
    TrainConfig,
    Velocity,
    augment_batch,
    dihedral,
    sgd_step,
    train_regressor,
    write_curve,
)

__all__ = [
    "ArrayPatchData", "ConvNet", "CurveRow", "LayerSpec", "TrainConfig", "Velocity",
    "augment_batch", "backward", "default_stack", "dense_apply", "dihedral", "format_stack",
    "forward", "infer", "init_net", "load_net", "mse_loss", "parse_stack", "save_net",
    "sgd_step", "train_regressor", "with_output_units",
]
