from .tensor import Tensor, flatten_tensors, load_flat
from .layers import (
    Layer,
    Linear,
    Conv2d,
    ReLU,
    Sigmoid,
    SoftmaxChannel,
    InstanceNorm2d,
    AvgPool2,
    Upsample2,
    GlobalAvgPool,
    Sequential,
    GradientReversal,
    activation,
    cross_entropy_logits,
)
from .optim import Adam
from .gradcheck import grad_check, grad_check_layer, central_difference
from .checkpoint import save_tensors, load_tensors, dump_tensors, parse_tensors

__all__ = [
    "Tensor", "flatten_tensors", "load_flat",
    "Layer", "Linear", "Conv2d", "ReLU", "Sigmoid", "SoftmaxChannel", "InstanceNorm2d",
    "AvgPool2", "Upsample2", "GlobalAvgPool", "Sequential", "GradientReversal",
    "activation", "cross_entropy_logits",
    "Adam",
    "grad_check", "grad_check_layer", "central_difference",
    "save_tensors", "load_tensors", "dump_tensors", "parse_tensors",
]
