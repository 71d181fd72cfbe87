"""Minimal layer containers over the autodiff core.

Modules register parameters and submodules through attribute assignment,
torch-style, so checkpoints can address every weight by a dotted name.
Running statistics (batch norm) are buffers: saved and restored with the
model but never differentiated.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ConvWeights, Tensor


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(np.asarray(data), requires_grad=True)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, ModuleList):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array: np.ndarray):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    # -- traversal ---------------------------------------------------------
    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self):
        self._set_mode(True)

    def eval(self):
        self._set_mode(False)

    def _set_mode(self, flag: bool):
        object.__setattr__(self, "training", flag)
        for m in self._modules.values():
            m._set_mode(flag)

    # -- checkpoint interchange -------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            out["buffer." + name] = b
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | {"buffer." + n for n in buffers}
        got = set(arrays)
        if expected != got:
            missing = sorted(expected - got)[:5]
            extra = sorted(got - expected)[:5]
            raise ValueError(f"state mismatch; missing={missing} extra={extra}")
        for name, p in params.items():
            arr = arrays[name]
            if tuple(arr.shape) != p.data.shape:
                raise ValueError(f"{name}: stored shape {arr.shape} vs model {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)
        for name, b in buffers.items():
            arr = arrays["buffer." + name]
            if tuple(arr.shape) != b.shape:
                raise ValueError(f"buffer {name}: stored {arr.shape} vs model {b.shape}")
            b[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList:
    """Ordered submodule container that participates in traversal."""

    def __init__(self, modules=()):
        self._items = list(modules)

    def append(self, m: Module):
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def named_parameters(self, prefix: str = ""):
        for i, m in enumerate(self._items):
            yield from m.named_parameters(f"{prefix}{i}.")

    def named_buffers(self, prefix: str = ""):
        for i, m in enumerate(self._items):
            yield from m.named_buffers(f"{prefix}{i}.")

    def _set_mode(self, flag: bool):
        for m in self._items:
            m._set_mode(flag)


def kaiming(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1,
                 padding: int | None = None, bias: bool = True, *,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if padding is None:
            padding = (k - 1) // 2
        self.kernel = Parameter(kaiming(rng, (c_out, c_in, k, k), c_in * k * k, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None
        self.stride = stride
        self.padding = padding

    def weights(self) -> ConvWeights:
        return ConvWeights(self.kernel, self.bias, self.stride, self.padding)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weights())


class Deconv2d(Module):
    """Transposed conv; the default k=4/s=2/p=1 doubles the spatial extent."""

    def __init__(self, c_in: int, c_out: int, k: int = 4, stride: int = 2,
                 padding: int = 1, bias: bool = True, *,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.kernel = Parameter(kaiming(rng, (c_out, c_in, k, k), c_in * k * k, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.deconv2d(x, ConvWeights(self.kernel, self.bias, self.stride, self.padding))


class BatchNorm2d(Module):
    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1, *,
                 dtype=np.float32):
        super().__init__()
        self.gamma = Parameter(np.ones(c, dtype=dtype))
        self.beta = Parameter(np.zeros(c, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(c, dtype=np.float64))
        self.register_buffer("running_var", np.ones(c, dtype=np.float64))
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta,
                             self.running_mean, self.running_var,
                             mode="train" if self.training else "eval",
                             eps=self.eps, momentum=self.momentum)
