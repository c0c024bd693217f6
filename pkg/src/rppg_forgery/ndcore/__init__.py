"""Minimal reverse-mode differentiable array engine (float64, CPU)."""
from .tensor import (DimensionError, NonFiniteError, Tape, Tensor, active_tape, as_tensor,
                     backward, parameter)
from .ops import (add, avg_pool2d, concat, conv2d, div, exp, getitem, log, log_softmax, matmul,
                  mean, mul, neg, power, reshape, sigmoid, sqrt, stack, sub, tanh, transpose)
from .ops import sum as sum_  # noqa: F401
from .nn import LSTMWeights, lstm_cell, pearson
from .gradcheck import check_gradients, numeric_grad, relative_error

softmax_log = log_softmax

__all__ = [
    "DimensionError", "NonFiniteError", "Tape", "Tensor", "active_tape", "as_tensor", "backward",
    "parameter", "add", "avg_pool2d", "concat", "conv2d", "div", "exp", "getitem", "log",
    "log_softmax", "softmax_log", "matmul", "mean", "mul", "neg", "power", "reshape", "sigmoid",
    "sqrt", "stack", "sub", "sum_", "tanh", "transpose", "LSTMWeights", "lstm_cell", "pearson",
    "check_gradients", "numeric_grad", "relative_error",
]
