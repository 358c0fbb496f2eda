"""Parameter containers and the small set of layers the network uses."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from ..errors import ConfigError
from . import functional as F
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that always requires gradients."""

    __slots__ = ()

    def __init__(self, data, dtype=None, name: str = ""):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


class Module:
    """Base container. Parameters, buffers and children are discovered from
    attributes in assignment order, so names are stable across runs."""

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for key, child in self._children():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in getattr(self, "_buffer_names", ()):
            yield prefix + key, getattr(self, key)
        for key, child in self._children():
            yield from child.named_buffers(prefix + key + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        dtype = np.dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for key in getattr(m, "_buffer_names", ()):
                setattr(m, key, getattr(m, key).astype(dtype))
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = {name for name, _ in self.named_buffers()}
        expected = set(params) | buffers
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        for m_prefix, m in self._named_modules():
            for key in getattr(m, "_buffer_names", ()):
                setattr(m, key, np.asarray(state[m_prefix + key]).astype(getattr(m, key).dtype).copy())

    def _named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, child in self._children():
            yield from child._named_modules(prefix + key + ".")


def kaiming_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        stride: int = 1,
        dilation: int = 1,
        groups: int = 1,
        bias: bool = False,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {kernel}")
        if in_ch % groups or out_ch % groups:
            raise ConfigError(f"groups={groups} must divide {in_ch} and {out_ch}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.dilation, self.groups = stride, dilation, groups
        self.padding = dilation * (kernel - 1) // 2
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = Parameter(kaiming_uniform((out_ch, in_ch // groups, kernel, kernel), fan_in, rng, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


class Linear(Module):
    def __init__(self, in_f: int, out_f: int, bias: bool = True, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(kaiming_uniform((out_f, in_f), in_f, rng, dtype))
        self.bias = Parameter(np.zeros(out_f, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    """Batch norm over channel axis 1; handles both N x C and NCHW inputs."""

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.eps, self.momentum,
        )


class ConvNormAct(Module):
    """Conv -> BatchNorm -> activation (activation may be None)."""

    def __init__(self, in_ch, out_ch, kernel, stride=1, dilation=1, act: Optional[str] = "hardswish", rng=None, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel, stride, dilation, rng=rng, dtype=dtype)
        self.norm = BatchNorm(out_ch, dtype=dtype)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(self.conv(x))
        return F.activation(self.act, y) if self.act else y


class LinearNormAct(Module):
    """Linear (no bias, the norm absorbs it) -> BatchNorm -> activation."""

    def __init__(self, in_f, out_f, act: Optional[str] = "hardswish", rng=None, dtype=np.float32):
        super().__init__()
        self.linear = Linear(in_f, out_f, bias=False, rng=rng, dtype=dtype)
        self.norm = BatchNorm(out_f, dtype=dtype)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(self.linear(x))
        return F.activation(self.act, y) if self.act else y
