"""Feature-extraction blocks: Conv-SE-NeXt and a plain residual baseline."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import BatchNorm, Conv2d, Module, Tensor
from .tensor import functional as F

BLOCK_TYPES = ("convsenext", "residual")


class Projection(Module):
    """Strided 1x1 conv + norm used on the skip path when shapes change."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng=None, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 1, stride, rng=rng, dtype=dtype)
        self.norm = BatchNorm(out_ch, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.conv(x))


def _skip(in_ch: int, out_ch: int, stride: int, rng, dtype) -> Optional[Projection]:
    return Projection(in_ch, out_ch, stride, rng, dtype) if stride != 1 or in_ch != out_ch else None


class ConvSENeXt(Module):
    """Depthwise-separable conv with squeeze-and-excitation and a residual add.

    dw (stride, dilation) -> BN -> Hardswish -> pw 1x1 -> BN, then the
    channels are rescaled by Hardsigmoid(W2 ReLU(W1 GAP)) and the (projected)
    input is added.
    """

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int = 3,
        stride: int = 1,
        dilation: int = 1,
        se_ratio: int = 4,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        super().__init__()
        if out_ch % se_ratio:
            raise ConfigError(f"SE ratio {se_ratio} must divide {out_ch} channels")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.dw = Conv2d(in_ch, in_ch, kernel, stride, dilation, groups=in_ch, rng=rng, dtype=dtype)
        self.dw_norm = BatchNorm(in_ch, dtype=dtype)
        self.pw = Conv2d(in_ch, out_ch, 1, rng=rng, dtype=dtype)
        self.pw_norm = BatchNorm(out_ch, dtype=dtype)
        self.se_reduce = Conv2d(out_ch, out_ch // se_ratio, 1, bias=True, rng=rng, dtype=dtype)
        self.se_expand = Conv2d(out_ch // se_ratio, out_ch, 1, bias=True, rng=rng, dtype=dtype)
        self.skip = _skip(in_ch, out_ch, stride, rng, dtype)

    def se_scale(self, y_pw: Tensor) -> Tensor:
        z = F.global_avg_pool(y_pw)
        return F.hardsigmoid(self.se_expand(F.relu(self.se_reduce(z))))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise DimensionError(f"expected N x {self.in_ch} x H x W input, got {x.shape}")
        y_dw = F.hardswish(self.dw_norm(self.dw(x)))
        y_pw = self.pw_norm(self.pw(y_dw))
        y = F.mul(y_pw, self.se_scale(y_pw))
        return F.add(y, self.skip(x) if self.skip is not None else x)


class ResidualBlock(Module):
    """Two 3x3 conv-BN-ReLU layers plus the (projected) input."""

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int = 3,
        stride: int = 1,
        dilation: int = 1,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
        act: str = "relu",
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.act = in_ch, out_ch, act
        self.conv1 = Conv2d(in_ch, out_ch, kernel, stride, dilation, rng=rng, dtype=dtype)
        self.norm1 = BatchNorm(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, kernel, 1, dilation, rng=rng, dtype=dtype)
        self.norm2 = BatchNorm(out_ch, dtype=dtype)
        self.skip = _skip(in_ch, out_ch, stride, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise DimensionError(f"expected N x {self.in_ch} x H x W input, got {x.shape}")
        y = F.activation(self.act, self.norm1(self.conv1(x)))
        y = F.activation(self.act, self.norm2(self.conv2(y)))
        return F.add(y, self.skip(x) if self.skip is not None else x)


def make_block(kind: str, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, dilation: int = 1,
               se_ratio: int = 4, rng=None, dtype=np.float32) -> Module:
    if kind == "convsenext":
        return ConvSENeXt(in_ch, out_ch, kernel, stride, dilation, se_ratio, rng, dtype)
    if kind == "residual":
        return ResidualBlock(in_ch, out_ch, kernel, stride, dilation, rng, dtype)
    raise ConfigError(f"unknown block type {kind!r}; expected one of {BLOCK_TYPES}")
