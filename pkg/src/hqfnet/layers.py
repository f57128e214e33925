"""Parameter initialization helpers and reusable conv blocks."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import OpTape, Tensor


def init_weight(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float = 1.0) -> Tensor:
    # variance-scaled uniform; there are no normalization layers, so signal
    # scale must survive the relu cascades on init alone (gain 2 before relu)
    bound = np.sqrt(3.0 * gain / max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape))


def init_bias(rng: np.random.Generator, n: int, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=n))


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


class Linear:
    def __init__(self, rng, in_dim: int, out_dim: int, zero_init: bool = False, gain: float = 1.0):
        if zero_init:
            self.w = zeros((out_dim, in_dim))
            self.b = zeros(out_dim)
        else:
            self.w = init_weight(rng, (out_dim, in_dim), in_dim, gain=gain)
            self.b = init_bias(rng, out_dim, in_dim)

    def __call__(self, x: Tensor, tape: OpTape | None = None) -> Tensor:
        return T.linear(x, self.w, self.b, tape)

    def named_params(self, prefix: str):
        return [(prefix + ".w", self.w), (prefix + ".b", self.b)]


class Conv1x1:
    def __init__(self, rng, in_ch: int, out_ch: int, zero_init: bool = False):
        if zero_init:
            self.w = zeros((out_ch, in_ch))
            self.b = zeros(out_ch)
        else:
            self.w = init_weight(rng, (out_ch, in_ch), in_ch)
            self.b = init_bias(rng, out_ch, in_ch)

    def __call__(self, x: Tensor, tape: OpTape | None = None) -> Tensor:
        return T.conv1x1(x, self.w, self.b, tape)

    def named_params(self, prefix: str):
        return [(prefix + ".w", self.w), (prefix + ".b", self.b)]


class DepthwiseSeparable:
    """Depthwise 3x3 (pad 1) + pointwise mix, the encoder/decoder workhorse."""

    def __init__(self, rng, in_ch: int, out_ch: int, stride: int = 1):
        self.stride = stride
        # the pair acts as one layer around a single relu: the depthwise half
        # preserves variance, the pointwise half carries the relu gain
        self.dw = init_weight(rng, (in_ch, 3, 3), 9)
        self.pw = init_weight(rng, (out_ch, in_ch), in_ch, gain=2.0)
        self.b = init_bias(rng, out_ch, in_ch)

    def __call__(self, x: Tensor, tape: OpTape | None = None) -> Tensor:
        return T.depthwise_separable_conv(x, self.dw, self.pw, self.b, self.stride, tape)

    def named_params(self, prefix: str):
        return [(prefix + ".dw", self.dw), (prefix + ".pw", self.pw), (prefix + ".b", self.b)]


class ConvBlock:
    """Two depthwise-separable convs with relu; first one may downsample."""

    def __init__(self, rng, in_ch: int, out_ch: int, stride: int = 1):
        self.c1 = DepthwiseSeparable(rng, in_ch, out_ch, stride)
        self.c2 = DepthwiseSeparable(rng, out_ch, out_ch, 1)

    def __call__(self, x: Tensor, tape: OpTape | None = None) -> Tensor:
        h = T.relu(self.c1(x, tape), tape)
        return T.relu(self.c2(h, tape), tape)

    def named_params(self, prefix: str):
        return self.c1.named_params(prefix + ".c1") + self.c2.named_params(prefix + ".c2")


class TransposedConv2x:
    def __init__(self, rng, in_ch: int, out_ch: int):
        # stride-2 non-overlapping 2x2: each output pixel sees one tap per
        # input channel, so the effective fan-in is in_ch
        self.w = init_weight(rng, (out_ch, in_ch, 2, 2), in_ch)
        self.b = init_bias(rng, out_ch, in_ch)

    def __call__(self, x: Tensor, tape: OpTape | None = None) -> Tensor:
        return T.transposed_conv2x(x, self.w, self.b, tape)

    def named_params(self, prefix: str):
        return [(prefix + ".w", self.w), (prefix + ".b", self.b)]
