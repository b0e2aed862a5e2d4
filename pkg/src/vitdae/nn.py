"""Parameter containers, layers and the Adam optimizer."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Attribute-walking parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad=True``; child
    modules may be attributes or lists of modules.  Names follow attribute
    order, so they are stable for a given constructor.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype).copy()
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        return self


def param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True, zero: bool = False):
        bound = 0.0 if zero else 1.0 / math.sqrt(n_in)
        self.w = param(rng.uniform(-bound, bound, (n_in, n_out)), dtype)
        self.b = param(np.zeros(n_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, dtype=np.float32,
                 stride: int = 1, pad: int | None = None, zero: bool = False):
        fan_in = c_in * k * k
        bound = 0.0 if zero else 1.0 / math.sqrt(fan_in)
        self.w = param(rng.uniform(-bound, bound, (c_out, c_in, k, k)), dtype)
        self.b = param(np.zeros(c_out), dtype)
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = param(np.ones(dim), dtype)
        self.bias = param(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, dtype=np.float32, eps: float = 1e-5):
        if channels % groups:
            raise ValueError(f"group count {groups} does not divide {channels} channels")
        self.groups = groups
        self.gain = param(np.ones(channels), dtype)
        self.bias = param(np.zeros(channels), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gain, self.bias, self.eps)


def sinusoidal_embedding(t: np.ndarray, dim: int, dtype=np.float32, base: float = 10000.0) -> np.ndarray:
    """(len(t), dim) table of sin/cos features with geometrically spaced frequencies."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(base) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb.astype(dtype)


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, grad_clip: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        scale = 1.0
        if self.grad_clip is not None:
            norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params))
            if norm > self.grad_clip:
                scale = self.grad_clip / (norm + 1e-12)
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * scale if scale != 1.0 else p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class EMA:
    """Exponential moving average of parameter values."""

    def __init__(self, module: Module, decay: float):
        self.decay = decay
        self.shadow = module.state_dict()

    def update(self, module: Module) -> None:
        for name, p in module.named_parameters():
            s = self.shadow[name]
            s *= self.decay
            s += (1 - self.decay) * p.data
