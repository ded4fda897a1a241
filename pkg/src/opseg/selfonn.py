"""Generative-neuron (Self-ONN) operational convolution.

Each output neuron holds one kernel per polynomial power ``q = 1..Q`` and
computes::

    out_k = b_k + sum_i sum_q conv(w[k, i, q], y_i ** q)

which is executed as Q ordinary convolutions over precomputed input powers.
With ``Q = 1`` the layer is exactly a convolution.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, conv2d, dropout, elem_pow, take, tanh


class SelfOnnLayer:
    """Weight bank of shape ``(K, C, Q, kh, kw)`` plus a per-neuron bias."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int | tuple[int, int] = 3,
        q: int = 3,
        pad: int | None = None,
        stride: int = 1,
        dropout_rate: float = 0.1,
        rng: np.random.Generator | None = None,
    ):
        if q < 1:
            raise ValueError(f"Self-ONN order Q must be >= 1, got {q}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else kernel_size
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = (kh, kw)
        self.q = q
        self.pad = kh // 2 if pad is None else pad
        self.stride = stride
        self.dropout_rate = dropout_rate
        rng = np.random.default_rng(0) if rng is None else rng
        bound = 1.0 / math.sqrt(in_channels * kh * kw * q)
        self.weights = Tensor(rng.uniform(-bound, bound, (out_channels, in_channels, q, kh, kw)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.weights, self.bias]

    def __call__(self, x: Tensor, training: bool = False, seed: int = 0) -> Tensor:
        return selfonn_forward(self, x, training=training, seed=seed)


def selfonn_forward(layer: SelfOnnLayer, x: Tensor, training: bool = False, seed: int = 0) -> Tensor:
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        got = x.shape[1] if x.ndim == 4 else x.shape
        raise ValueError(f"selfonn_forward: expected {layer.in_channels} input channels, got {got}")
    out = None
    for q in range(1, layer.q + 1):
        # the bias enters once, on the first power term
        b = layer.bias if q == 1 else None
        term = conv2d(elem_pow(x, q), take(layer.weights, q - 1, axis=2), b, layer.stride, layer.pad)
        out = term if out is None else out + term
    if training and layer.dropout_rate > 0:
        out = dropout(out, layer.dropout_rate, seed)
    return out


class SelfOnnBlock:
    """Self-ONN layer followed by tanh."""

    def __init__(self, layer: SelfOnnLayer):
        self.layer = layer

    @property
    def dropout_rate(self) -> float:
        return self.layer.dropout_rate

    def parameters(self) -> list[Tensor]:
        return self.layer.parameters()

    def __call__(self, x: Tensor, training: bool = False, seed: int = 0) -> Tensor:
        return block_forward(self, x, training=training, seed=seed)


def block_forward(block: SelfOnnBlock, x: Tensor, training: bool = False, seed: int = 0) -> Tensor:
    return tanh(selfonn_forward(block.layer, x, training=training, seed=seed))
