"""Parameter containers and the few layers the model is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name="param")


class Module:
    """Attribute-walking container; parameters are discovered in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.name == "param":
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if own[k].shape != v.shape:
                raise ValueError(f"{k}: shape {v.shape} != {own[k].shape}")
            own[k].data = np.array(v, dtype=np.float64)

    def requires_grad_(self, flag: bool = True) -> "Module":
        for _, p in self.named_parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """``y = x @ W + b`` over the last axis; W is [in, out]."""

    def __init__(self, rng, d_in: int, d_out: int, std: float = 0.02, zero: bool = False,
                 bias: bool = True):
        self.weight = param(np.zeros((d_in, d_out)) if zero else trunc_normal(rng, (d_in, d_out), std))
        self.bias = param(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, zero: bool = False):
        fan_in = c_in * k * k
        if zero:
            w = np.zeros((c_out, c_in, k, k))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
        self.weight = param(w)
        self.bias = param(np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)


class LayerNorm(Module):
    """Normalization over one axis with a learned per-feature affine."""

    def __init__(self, dim: int, axis: int = -1, ndim: int = 1):
        self.axis = axis
        shape = [1] * ndim
        shape[axis] = dim
        self.weight = param(np.ones(shape))
        self.bias = param(np.zeros(shape))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, axis=self.axis) * self.weight + self.bias


class ChannelNorm(LayerNorm):
    """LayerNorm across channels of an [N, C, H, W] map."""

    def __init__(self, dim: int):
        super().__init__(dim, axis=1, ndim=4)


class FeedForward(Module):
    """Two-layer GELU MLP with 4x expansion."""

    def __init__(self, rng, dim: int, expansion: int = 4):
        self.fc1 = Linear(rng, dim, dim * expansion)
        self.fc2 = Linear(rng, dim * expansion, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))
