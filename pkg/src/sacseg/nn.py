"""Parameter-holding layers built on the tensor ops."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype, parameter


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for k, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{k}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
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

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        buffers = {name for name, _ in self.named_buffers()}
        missing = (set(own) | buffers) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.astype(p.data.dtype).copy()
        for name in buffers:
            owner, attr = self._resolve(name)
            setattr(owner, attr, np.asarray(state[name], dtype=getattr(owner, attr).dtype).copy())

    def _resolve(self, dotted: str) -> tuple["Module", str]:
        parts = dotted.split(".")
        obj = self
        i = 0
        while i < len(parts) - 1:
            value = getattr(obj, parts[i])
            if isinstance(value, (list, tuple)):
                value = value[int(parts[i + 1])]
                i += 1
            obj = value
            i += 1
        return obj, parts[-1]


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Conv2d(Module):
    """K x K convolution; K must be odd so kernel offsets centre on the pixel."""

    def __init__(self, in_channels: int, out_channels: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True,
                 gain: float = np.sqrt(2.0)):
        if k <= 0 or k % 2 == 0:
            raise ValueError(f"convolution kernel size must be odd, got {k}")
        if stride < 1:
            raise ValueError(f"stride must be positive, got {stride}")
        self.in_channels, self.out_channels, self.k = in_channels, out_channels, k
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        fan_in = in_channels * k * k
        self.weight = parameter(uniform_fan_in(rng, (out_channels, in_channels, k, k), fan_in, gain))
        self.bias = parameter(np.zeros(out_channels, dtype=get_default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_hw(self, hw: tuple[int, int]) -> tuple[int, int]:
        return tuple(ops.conv_output_size(s, self.k, self.stride, self.padding) for s in hw)

    def cost(self, hw: tuple[int, int]) -> tuple[int, int, tuple[int, int]]:
        """(params, MACs, output size) for an ``hw`` input."""
        ho, wo = self.output_hw(hw)
        taps = self.out_channels * self.in_channels * self.k * self.k
        params = taps + (self.out_channels if self.bias is not None else 0)
        return params, taps * ho * wo, (ho, wo)


class ConvTranspose2d(Module):
    """Learned x2 upsampling (kernel 4, stride 2, padding 1)."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 k: int = 4, stride: int = 2, padding: int = 1, bias: bool = True):
        self.in_channels, self.out_channels = in_channels, out_channels
        self.k, self.stride, self.padding = k, stride, padding
        fan_in = in_channels * (k // stride) ** 2
        self.weight = parameter(uniform_fan_in(rng, (in_channels, out_channels, k, k), fan_in,
                                               np.sqrt(2.0)))
        self.bias = parameter(np.zeros(out_channels, dtype=get_default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)

    def cost(self, hw):
        h, w = hw
        out = ((h - 1) * self.stride + self.k - 2 * self.padding,
               (w - 1) * self.stride + self.k - 2 * self.padding)
        taps = self.in_channels * self.out_channels * self.k * self.k
        params = taps + (self.out_channels if self.bias is not None else 0)
        return params, taps * h * w, out


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        dtype = get_default_dtype()
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.gamma = parameter(np.ones(channels, dtype=dtype))
        self.beta = parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if not self.training:
            return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                                  self.eps)
        out, m, v = ops.batch_norm(x, self.gamma, self.beta, eps=self.eps)
        count = x.size // self.channels
        unbiased = v * count / max(count - 1, 1)
        self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * m
        self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        return out

    def cost(self, hw):
        return 2 * self.channels, 0, hw


class Identity(Module):
    def forward(self, x):
        return x

    def cost(self, hw):
        return 0, 0, hw


class NormAct(Module):
    """Optional batch norm followed by a leaky rectifier."""

    def __init__(self, channels: int, norm: bool = True, slope: float = 0.1):
        self.norm = BatchNorm2d(channels) if norm else None
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        if self.norm is not None:
            x = self.norm(x)
        return ops.leaky_relu(x, self.slope)

    def cost(self, hw):
        return (self.norm.cost(hw) if self.norm is not None else (0, 0, hw))


class SGD:
    """Momentum SGD; L2 weight decay is folded into the gradient."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 1e-4):
        self.params = params
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
