"""Parameterised layers on top of :mod:`nexus.tensor` and a small parameter registry."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .io import read_container, write_container
from .tensor import DimensionError, Tensor

INIT_SCHEMES = ("he_normal", "zero")


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, name: str | None = None):
        super().__init__(np.array(data, dtype=T.get_default_dtype()), requires_grad, name=name)


class Module:
    """Parameter container; attributes that are modules, parameters or lists of them are registered."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, (Module, Parameter)):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Module, Parameter)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, val in self._children():
            if isinstance(val, Parameter):
                yield prefix + name, val
            else:
                yield from val.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if tuple(arr.shape) != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def reset_parameters(self, scheme: str, rng: np.random.Generator) -> None:
        """Leaf layers override this; containers are handled by :func:`init_parameters`."""


def init_parameters(module: Module, scheme: str = "he_normal", seed=0) -> None:
    """Initialise every layer in ``module``.

    ``he_normal`` draws weights from N(0, 2/fan_in) with zero biases (norm layers
    reset to identity); ``zero`` sets every parameter to 0. ``seed`` may be an
    int or a ``numpy.random.Generator``.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for m in module.modules():
        m.reset_parameters(scheme, rng)


def _rng(rng) -> np.random.Generator:
    if rng is None:
        return np.random.default_rng(0)
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1,
                 groups: int = 1, bias: bool = True, rng=None, init: str = "he_normal"):
        if kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {kernel}")
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        if groups < 1 or in_channels % groups or out_channels % groups:
            raise DimensionError(
                f"channels {in_channels}->{out_channels} not divisible by groups={groups}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = kernel // 2
        self.groups = groups
        self.weight = Parameter(np.zeros((out_channels, in_channels // groups, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.reset_parameters(init, _rng(rng))

    @property
    def fan_in(self) -> int:
        return self.in_channels // self.groups * self.kernel ** 2

    @staticmethod
    def count(in_channels, out_channels, kernel, groups=1, bias=True) -> int:
        return out_channels * (in_channels // groups) * kernel * kernel + (out_channels if bias else 0)

    def reset_parameters(self, scheme, rng):
        if scheme == "he_normal":
            std = np.sqrt(2.0 / self.fan_in)
            self.weight.data = (rng.standard_normal(self.weight.shape) * std).astype(self.weight.dtype)
        else:
            self.weight.data = np.zeros_like(self.weight.data)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise DimensionError(f"conv expects {self.in_channels} input channels, got {x.shape[1]}")
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=None,
                 init: str = "he_normal"):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(np.zeros((in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None
        self.reset_parameters(init, _rng(rng))

    def reset_parameters(self, scheme, rng):
        if scheme == "he_normal":
            std = np.sqrt(2.0 / self.in_features)
            self.weight.data = (rng.standard_normal(self.weight.shape) * std).astype(self.weight.dtype)
        else:
            self.weight.data = np.zeros_like(self.weight.data)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + T.reshape(self.bias, (1,) * (y.ndim - 1) + (self.out_features,))
        return y


class GroupNorm(Module):
    """Group normalisation with ``min(32, C)`` groups and per-channel affine."""

    def __init__(self, num_channels: int, num_groups: int | None = None, eps: float = 1e-5):
        groups = num_groups or min(32, num_channels)
        if num_channels % groups:
            raise DimensionError(f"{num_channels} channels not divisible into {groups} groups")
        self.num_channels = num_channels
        self.num_groups = groups
        self.eps = eps
        self.weight = Parameter(np.ones(num_channels))
        self.bias = Parameter(np.zeros(num_channels))

    def reset_parameters(self, scheme, rng):
        fill = 1.0 if scheme == "he_normal" else 0.0
        self.weight.data = np.full_like(self.weight.data, fill)
        self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.num_channels:
            raise DimensionError(f"norm expects {self.num_channels} channels, got {x.shape[1]}")
        return T.group_norm(x, self.weight, self.bias, self.num_groups, self.eps)


class PixelUnshuffle(Module):
    def __init__(self, factor: int = 8):
        self.factor = factor

    def forward(self, x: Tensor) -> Tensor:
        return T.pixel_unshuffle(x, self.factor)


def save_checkpoint(path, modules: dict[str, Module], manifest: dict | None = None) -> None:
    arrays = {}
    for prefix, mod in modules.items():
        for name, arr in mod.state_dict().items():
            arrays[f"{prefix}/{name}"] = arr
    write_container(path, manifest or {}, arrays)


def load_checkpoint(path, modules: dict[str, Module] | None = None) -> dict:
    """Load parameters into ``modules`` (keyed by prefix); returns the manifest."""
    manifest, arrays = read_container(path)
    for prefix, mod in (modules or {}).items():
        sub = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.split("/", 1)[0] == prefix}
        mod.load_state_dict(sub)
    manifest["_arrays"] = arrays
    return manifest
