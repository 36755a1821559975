"""Parameter-holding layers built on the functional ops."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, Tensor


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; its stream is identical on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)


class Module:
    """Minimal container: tracks parameters, buffers, submodules and mode."""

    def __init__(self) -> None:
        self.training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")
        for key in getattr(self, "_buffer_names", ()):
            yield prefix + key, getattr(self, key)

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data.copy()
        for name, b in self.named_buffers():
            state[name] = b.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into matching slots; return the names that were loaded."""
        loaded = []
        targets = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        for name, arr in state.items():
            dst = targets.get(name)
            if dst is None or dst.shape != arr.shape:
                if strict:
                    raise KeyError(f"state entry {name!r} does not match this module")
                continue
            dst[...] = arr
            loaded.append(name)
        if strict and len(loaded) != len(targets):
            missing = sorted(set(targets) - set(loaded))
            raise KeyError(f"state is missing entries: {missing}")
        return loaded

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = Tensor(kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, DEFAULT_DTYPE), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0):
        super().__init__()
        self.stride, self.padding = stride, padding
        # fan-in taken from axis 1, matching the common convention for transposed kernels
        self.weight = Tensor(kaiming_uniform(rng, (in_ch, out_ch, kernel, kernel), out_ch * kernel * kernel), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, DEFAULT_DTYPE), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, rng, in_features: int, out_features: int):
        super().__init__()
        self.weight = Tensor(kaiming_uniform(rng, (out_features, in_features), in_features), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, DEFAULT_DTYPE), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, DEFAULT_DTYPE), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, DEFAULT_DTYPE), requires_grad=True)
        self.running_mean = np.zeros(channels, DEFAULT_DTYPE)
        self.running_var = np.ones(channels, DEFAULT_DTYPE)
        self.update_stats = True

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, update_stats=self.update_stats,
        )


class BasicBlock(Module):
    """Two 3x3 conv/BN pairs with an identity or 1x1 projection shortcut."""

    def __init__(self, rng, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = Conv2d(rng, in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(rng, out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = BatchNorm2d(out_ch)
        self.shortcut_conv: Optional[Conv2d] = None
        self.shortcut_bn: Optional[BatchNorm2d] = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut_conv = Conv2d(rng, in_ch, out_ch, 1, stride=stride, bias=False)
            self.shortcut_bn = BatchNorm2d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut_conv is None else self.shortcut_bn(self.shortcut_conv(x))
        return F.relu(F.add(out, skip))
