"""Minimal dense-tensor layer library with explicit backward passes."""

from .params import Parameter, ParameterSet, he_uniform
from .layers import (
    BN_EPS,
    BN_MOMENTUM,
    BatchNorm1d,
    Conv1d,
    Layer,
    Linear,
    ReLU,
    Sigmoid,
    Softmax,
    Tanh,
    TDNNBlock,
    lengths_to_mask,
    softmax,
    softmax_backward,
)
from .functional import (
    batchnorm1d,
    conv1d_forward,
    cross_entropy,
    linear_forward,
    log_softmax,
    relu,
    sigmoid,
    tanh,
)
from .optim import Adam
from .serc import load_parameters, save_parameters

__all__ = [
    "Adam",
    "BN_EPS",
    "BN_MOMENTUM",
    "BatchNorm1d",
    "Conv1d",
    "Layer",
    "Linear",
    "Parameter",
    "ParameterSet",
    "ReLU",
    "Sigmoid",
    "Softmax",
    "Tanh",
    "TDNNBlock",
    "batchnorm1d",
    "conv1d_forward",
    "cross_entropy",
    "he_uniform",
    "lengths_to_mask",
    "linear_forward",
    "load_parameters",
    "log_softmax",
    "relu",
    "save_parameters",
    "sigmoid",
    "softmax",
    "softmax_backward",
    "tanh",
]
