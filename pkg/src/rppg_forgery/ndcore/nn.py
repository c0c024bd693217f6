"""Composite layers built from the primitives in :mod:`ops`."""
from __future__ import annotations

from typing import NamedTuple, Tuple

from . import ops
from .tensor import DimensionError, Tensor


class LSTMWeights(NamedTuple):
    """Gate-stacked weights in (input, forget, cell, output) order."""

    w_ih: Tensor  # [4H, D]
    w_hh: Tensor  # [4H, H]
    bias: Tensor  # [4H]


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, weights: LSTMWeights) -> Tuple[Tensor, Tensor]:
    """One LSTM step; ``x`` is ``[D]`` or ``[B, D]``, ``h`` and ``c`` likewise with width H."""
    w_ih, w_hh, bias = weights
    four_h, d = w_ih.shape
    hidden = four_h // 4
    if four_h != 4 * hidden or w_hh.shape != (four_h, hidden) or bias.shape != (four_h,):
        raise DimensionError(
            f"lstm_cell: inconsistent weights w_ih {w_ih.shape}, w_hh {w_hh.shape}, bias {bias.shape}")
    if x.shape[-1] != d:
        raise DimensionError(f"lstm_cell: input width {x.shape[-1]} does not match w_ih {w_ih.shape}")
    if h.shape[-1] != hidden or c.shape[-1] != hidden:
        raise DimensionError(f"lstm_cell: state widths {h.shape}, {c.shape} do not match hidden size {hidden}")
    gates = x @ w_ih.T + h @ w_hh.T + bias
    i = ops.sigmoid(gates[..., 0:hidden])
    f = ops.sigmoid(gates[..., hidden:2 * hidden])
    g = ops.tanh(gates[..., 2 * hidden:3 * hidden])
    o = ops.sigmoid(gates[..., 3 * hidden:4 * hidden])
    c_next = f * c + i * g
    h_next = o * ops.tanh(c_next)
    return h_next, c_next


def pearson(x: Tensor, y: Tensor, axis: int = 0, eps: float = 1e-8) -> Tensor:
    """Pearson correlation along ``axis`` with a variance guard.

    ``r = cov / (std_x * std_y + eps)`` using population moments; a constant
    series has zero covariance, so it yields ``r = 0``.
    """
    if x.shape != y.shape:
        raise DimensionError(f"pearson: shapes differ, {x.shape} vs {y.shape}")
    xc = x - ops.mean(x, axis=axis, keepdims=True)
    yc = y - ops.mean(y, axis=axis, keepdims=True)
    cov = ops.mean(xc * yc, axis=axis)
    sx = ops.sqrt(ops.mean(xc * xc, axis=axis))
    sy = ops.sqrt(ops.mean(yc * yc, axis=axis))
    return cov / (sx * sy + eps)
