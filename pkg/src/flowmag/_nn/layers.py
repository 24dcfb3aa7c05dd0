"""
Parameterized layers built on the functional operations.

Modules register their parameters, buffers and children explicitly; names
are dotted paths ("resblocks.3.conv1.weight") in registration order, so the
name set of a model is a pure function of how it was constructed.
"""

# Copyright 2025 Flowmag Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

from typing import Any, Dict, Iterator, List, Tuple

import numpy as np
import numpy.typing as npt

from ..errors import ConfigError
from . import functional as F
from .tensor import Array, Tensor


class Parameter(Tensor):
    """A leaf Tensor that always requires grad."""

    def __init__(self, data: npt.ArrayLike, dtype: npt.DTypeLike = np.float32):
        super().__init__(np.asarray(data, dtype=dtype), requires_grad=True, dtype=dtype)


def fan_in_gaussian(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Array:
    """He-style N(0, 2 / fan_in) initialization."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


class Module:
    """Base class: parameter/buffer registry, train/eval mode and dtype casting."""

    def __init__(self) -> None:
        self.training = True
        self._params: Dict[str, Parameter] = {}
        self._buffers: Dict[str, Array] = {}
        self._children: Dict[str, "Module"] = {}

    def add_parameter(self, name: str, value: npt.ArrayLike) -> Parameter:
        param = Parameter(value)
        self._params[name] = param
        return param

    def add_buffer(self, name: str, value: npt.ArrayLike) -> None:
        self._buffers[name] = np.asarray(value, dtype=np.float32)

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def buffer(self, name: str) -> Array:
        return self._buffers[name]

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._params.items():
            yield prefix + name, param
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, Array]]:
        for name, buf in self._buffers.items():
            yield prefix + name, buf
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def set_buffer(self, dotted: str, value: npt.ArrayLike) -> None:
        """Replace a buffer addressed by its dotted name, keeping its dtype."""
        owner: Module = self
        *path, leaf = dotted.split(".")
        for part in path:
            owner = owner._children[part]
        current = owner._buffers[leaf]
        value = np.asarray(value, dtype=current.dtype)
        if value.shape != current.shape:
            raise ConfigError("nn-core", f"buffer {dotted} expects shape {current.shape}, got {value.shape}")
        owner._buffers[leaf] = value.copy()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def astype(self, dtype: npt.DTypeLike) -> "Module":
        """Cast every parameter and buffer in place (float64 for gradient checks)."""
        for param in self._params.values():
            param.data = param.data.astype(dtype)
            param.grad = None
        for name in list(self._buffers):
            self._buffers[name] = self._buffers[name].astype(dtype)
        for child in self._children.values():
            child.astype(dtype)
        return self

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError


class Conv2d(Module):
    """Same-padded stride-1 convolution."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        gain: float = 1.0,
        bias: float = 0.0,
    ):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError("nn-core", f"convolution kernel must be odd, got {kernel}")
        fan_in = in_channels * kernel * kernel
        weight = fan_in_gaussian(rng, (out_channels, in_channels, kernel, kernel), fan_in)
        self.weight = self.add_parameter("weight", weight * np.float32(gain))
        self.bias = self.add_parameter("bias", np.full(out_channels, bias))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = self.add_parameter("gamma", np.ones(channels))
        self.beta = self.add_parameter("beta", np.zeros(channels))
        self.add_buffer("running_mean", np.zeros(channels))
        self.add_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm2d(
            x,
            self.gamma,
            self.beta,
            self.buffer("running_mean"),
            self.buffer("running_var"),
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.weight = self.add_parameter(
            "weight", fan_in_gaussian(rng, (out_features, in_features), in_features)
        )
        self.bias = self.add_parameter("bias", np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return F.dense(x, self.weight, self.bias)


class Embedding(Module):
    """Lookup table of shape (vocab, width), uniform in [-init_range, init_range]."""

    def __init__(
        self,
        vocab: int,
        width: int,
        rng: np.random.Generator,
        feature: str,
        init_range: float = 0.1,
    ):
        super().__init__()
        self.feature = feature
        self.table = self.add_parameter(
            "table", rng.uniform(-init_range, init_range, size=(vocab, width))
        )

    @property
    def vocab(self) -> int:
        return self.table.shape[0]

    def forward(self, indices: npt.ArrayLike) -> Tensor:
        return F.embedding(self.table, indices, feature=self.feature)


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        super().__init__()
        self.rate = rate
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return F.dropout(x, self.rate, self.training, self.rng)


class SubPixelBlock(Module):
    """conv 3x3 to C*r^2 channels, batch norm, PixelShuffle(r), ReLU."""

    def __init__(
        self,
        channels: int,
        factor: int,
        rng: np.random.Generator,
        bn_eps: float = 1e-5,
        bn_momentum: float = 0.1,
    ):
        super().__init__()
        self.factor = factor
        self.conv = self.add_module("conv", Conv2d(channels, channels * factor * factor, 3, rng))
        self.bn = self.add_module("bn", BatchNorm2d(channels * factor * factor, bn_eps, bn_momentum))

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(F.pixel_shuffle(self.bn(self.conv(x)), self.factor))


class ResidualBlock(Module):
    """conv-BN-ReLU-conv-BN with an identity shortcut."""

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        bn_eps: float = 1e-5,
        bn_momentum: float = 0.1,
    ):
        super().__init__()
        self.conv1 = self.add_module("conv1", Conv2d(channels, channels, 3, rng))
        self.bn1 = self.add_module("bn1", BatchNorm2d(channels, bn_eps, bn_momentum))
        self.conv2 = self.add_module("conv2", Conv2d(channels, channels, 3, rng))
        self.bn2 = self.add_module("bn2", BatchNorm2d(channels, bn_eps, bn_momentum))

    def forward(self, x: Tensor) -> Tensor:
        h = F.relu(self.bn1(self.conv1(x)))
        return F.add(x, self.bn2(self.conv2(h)))


class Sequential(Module):
    """Children named "0", "1", ... applied in order."""

    def __init__(self, *modules: Module):
        super().__init__()
        for i, module in enumerate(modules):
            self.add_module(str(i), module)

    def __len__(self) -> int:
        return len(self._children)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._children.values())

    def forward(self, x: Tensor) -> Tensor:
        for module in self._children.values():
            x = module(x)
        return x


def prime_factors(n: int) -> List[int]:
    """Prime factorization in nondecreasing order: 4 -> [2, 2], 6 -> [2, 3]."""
    if n < 2:
        raise ConfigError("model", f"scale factor N must be >= 2, got {n}")
    factors = []
    p = 2
    while p * p <= n:
        while n % p == 0:
            factors.append(p)
            n //= p
        p += 1
    if n > 1:
        factors.append(n)
    return factors


def upsampling_chain(
    channels: int,
    scale: int,
    rng: np.random.Generator,
    bn_eps: float = 1e-5,
    bn_momentum: float = 0.1,
) -> Sequential:
    """One SubPixelBlock per prime factor of `scale`."""
    return Sequential(
        *(SubPixelBlock(channels, r, rng, bn_eps, bn_momentum) for r in prime_factors(scale))
    )
