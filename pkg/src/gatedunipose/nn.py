"""Minimal module system: parameter registry, train/eval mode, basic layers."""
from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .seeding import derive_seed
from .tensor import BatchNormState, ConvSpec, Parameter, Tensor


class Module:
    """Base class with torch-like attribute-driven parameter discovery.

    Parameters, sub-modules and lists of sub-modules assigned as attributes are
    registered in insertion order; the dotted attribute path is the
    parameter name.
    """

    training = True

    def named_children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, child in enumerate(value):
                    yield f"{key}.{i}", child

    def named_modules(self, prefix=""):
        yield prefix, self
        for key, child in self.named_children():
            yield from child.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (f"{prefix}.{key}" if prefix else key), value
        for key, child in self.named_children():
            yield from child.named_parameters(f"{prefix}.{key}" if prefix else key)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        """Non-trainable arrays (norm running statistics)."""
        for name, module in self.named_modules(prefix):
            for key, arr in module._local_buffers():
                yield (f"{name}.{key}" if name else key), arr

    def _local_buffers(self):
        return ()

    def set_buffer(self, key: str, value: np.ndarray) -> None:
        raise KeyError(key)

    def train(self, mode: bool = True):
        for _, module in self.named_modules():
            module.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def reset_parameters(self, seed: int) -> None:
        """Initialise every parameter from a seed derived from (seed, name).

        Deriving per-name streams keeps a parameter's initial value independent
        of which other modules exist, so ablation switches only perturb their
        own subtree.
        """
        for name, p in self.named_parameters():
            p.reset(np.random.default_rng(derive_seed(seed, zlib.crc32(name.encode()))))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, zero_init: bool = False):
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel[0] * spec.kernel[1]
        init = ("const", 0.0) if zero_init else ("fan_in", fan_in)
        self.weight = Parameter(spec.weight_shape(), init)
        self.bias = Parameter((spec.out_channels,), init) if spec.has_bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.spec)


class ConvTranspose2d(Module):
    def __init__(self, spec: ConvSpec):
        self.spec = spec
        fan_in = (spec.out_channels // spec.groups) * spec.kernel[0] * spec.kernel[1]
        self.weight = Parameter(spec.transposed_weight_shape(), ("fan_in", fan_in))
        self.bias = Parameter((spec.out_channels,), ("fan_in", fan_in)) if spec.has_bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.transposed_conv2d(x, self.weight, self.spec, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Parameter((channels,), ("const", 1.0))
        self.bias = Parameter((channels,), ("const", 0.0))
        self.state = BatchNormState(channels, momentum, eps)

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.weight, self.bias, self.state, self.training)

    def _local_buffers(self):
        return (("running_mean", self.state.running_mean), ("running_var", self.state.running_var))

    def set_buffer(self, key, value):
        if key not in ("running_mean", "running_var"):
            raise KeyError(key)
        current = getattr(self.state, key)
        if value.shape != current.shape:
            raise ValueError(f"{key}: shape {value.shape} != {current.shape}")
        setattr(self.state, key, np.array(value, dtype=current.dtype))

    def folded(self):
        """(scale, shift) such that bn(y) == y * scale + shift in eval mode."""
        std = np.sqrt(self.state.running_var.astype(np.float64) + self.state.eps)
        gamma = self.weight.data.astype(np.float64)
        scale = gamma / std
        shift = self.bias.data.astype(np.float64) - self.state.running_mean.astype(np.float64) * scale
        return scale, shift


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, zero_init: bool = False):
        init = ("const", 0.0) if zero_init else ("fan_in", in_features)
        self.weight = Parameter((out_features, in_features), init)
        self.bias = Parameter((out_features,), init)

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)
