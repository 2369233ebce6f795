"""Parameterized building blocks on top of the autodiff tape."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Tiny parameter container with recursive named-parameter traversal."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_mods", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._mods[name] = value
        elif isinstance(value, (list, tuple)) and value and all(
                isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._mods[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_params(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, m in self._mods.items():
            yield from m.named_params(f"{prefix}{name}.")

    def params(self):
        for _, p in self.named_params():
            yield p

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_params()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_params())
        missing = set(own) ^ set(state)
        if missing:
            raise KeyError(f"parameter name mismatch: {sorted(missing)}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: "
                                 f"{arr.shape} vs {p.data.shape}")
            p.data = arr

    def astype(self, dtype) -> "Module":
        for p in self.params():
            p.data = p.data.astype(dtype)
        return self

    def num_params(self) -> int:
        return sum(p.size for p in self.params())


def param(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32),
                  requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1,
                 pad_mode: str = "zero", bias: bool = True):
        super().__init__()
        fan_in = cin * k * k
        self.w = param(rng, (cout, cin, k, k), np.sqrt(2.0 / fan_in))
        self.b = zeros_param((cout,)) if bias else None
        self.stride = stride
        self.pad_mode = pad_mode

    def __call__(self, x) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride,
                         pad_mode=self.pad_mode)


class Linear(Module):
    def __init__(self, rng, cin: int, cout: int, bias: bool = True):
        super().__init__()
        self.w = param(rng, (cin, cout), np.sqrt(1.0 / cin))
        self.b = zeros_param((cout,)) if bias else None

    def __call__(self, x) -> Tensor:
        y = ad.matmul(x, self.w)
        return y if self.b is None else ad.add(y, self.b)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.g = ones_param((dim,))
        self.b = zeros_param((dim,))

    def __call__(self, x) -> Tensor:
        return ad.layernorm(x, self.g, self.b)


def channel_norm(x: Tensor, ln: LayerNorm) -> Tensor:
    """LayerNorm over the channel axis of a (B, C, H, W) map."""
    return ad.layernorm(x, ln.g, ln.b, axis=1)
