"""Neural building blocks composed from autograd primitives.

These are thin composites: their gradients come entirely from the
primitives in :mod:`docstruct.autograd`, which keeps every path covered by
the same finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, concat
from .errors import ContractError, DimensionError


class LengthError(DimensionError):
    """A sequence is too short for the requested window."""


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty last axis")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gain + bias


def conv1d(seq: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid cross-correlation over the length axis of seq[len, d_in].

    `weight` has shape [k * d_in, d_out], rows ordered by (offset, channel):
    output[t] = sum_j seq[t + j] . weight[j*d_in:(j+1)*d_in] + bias.
    """
    if seq.ndim != 2 or weight.ndim != 2:
        raise DimensionError(
            f"conv1d expects seq[len,d_in], weight[k*d_in,d_out]; "
            f"got {seq.shape}, {weight.shape}"
        )
    n, d_in = seq.shape
    if weight.shape[0] % d_in != 0:
        raise DimensionError(
            f"conv1d weight rows {weight.shape[0]} not a multiple of d_in {d_in}"
        )
    k = weight.shape[0] // d_in
    if n < k:
        raise LengthError(f"conv1d sequence length {n} shorter than kernel {k}")
    if k == 1:
        windows = seq
    else:
        windows = concat([seq[j : j + n - k + 1] for j in range(k)], axis=1)
    return linear(windows, weight, bias)


@dataclass
class LSTMParams:
    """Gate weights for one LSTM cell; gate order is (input, forget, cell, output)."""

    w_x: Tensor  # [d_in, 4*d_h]
    w_h: Tensor  # [d_h, 4*d_h]
    b: Tensor  # [4*d_h]

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]


def lstm_step(
    x: Tensor, h: Tensor, c: Tensor, params: LSTMParams
) -> tuple[Tensor, Tensor]:
    """One gated recurrence step on 1-D state vectors; returns (h', c')."""
    d_h = params.hidden_size
    if x.ndim != 1 or h.ndim != 1 or c.ndim != 1:
        raise DimensionError("lstm_step expects 1-D x, h, c")
    if x.shape[0] != params.w_x.shape[0] or h.shape[0] != d_h or c.shape[0] != d_h:
        raise DimensionError(
            f"lstm_step shapes inconsistent with weights: x={x.shape}, "
            f"h={h.shape}, c={c.shape}, w_x={params.w_x.shape}"
        )
    gates = (
        x.reshape(1, -1) @ params.w_x + h.reshape(1, -1) @ params.w_h + params.b
    ).reshape(4 * d_h)
    i = gates[0:d_h].sigmoid()
    f = gates[d_h : 2 * d_h].sigmoid()
    g = gates[2 * d_h : 3 * d_h].tanh()
    o = gates[3 * d_h : 4 * d_h].sigmoid()
    c_next = f * c + i * g
    h_next = o * c_next.tanh()
    return h_next, c_next


# -- initialization -----------------------------------------------------------


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Glorot-style uniform init; fan sizes from the first/last extents."""
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    fan_out = shape[-1] if len(shape) > 1 else shape[0]
    if len(shape) == 4:  # conv kernels [out, in, k, k]
        receptive = shape[2] * shape[3]
        fan_in = shape[1] * receptive
        fan_out = shape[0] * receptive
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-bound, bound, size=shape)
