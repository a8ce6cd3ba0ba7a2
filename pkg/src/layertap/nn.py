"""Parameter containers: modules, linear maps, layer norm.

``Module`` discovers parameters by walking instance attributes (tensors,
child modules, and lists of either), so parameter paths read like
``layers.3.ffn.w1``. Those paths are the checkpoint format's keys and the
freeze bookkeeping's identity.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, add, layer_norm, matmul


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor):
                        yield f"{path}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place; used to rerun graphs in 64-bit."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def param(rng: np.random.Generator, shape, scale: float = 1.0, dtype=np.float32) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=dtype)


class Linear(Module):
    """y = x @ w + b with fan-in scaled normal init (or zeros)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None,
                 zero_init: bool = False, dtype=np.float32):
        if zero_init:
            self.w = Tensor(np.zeros((d_in, d_out)), requires_grad=True, dtype=dtype)
            self.b = Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype)
        else:
            if rng is None:
                raise ValueError("Linear needs an rng unless zero_init=True")
            self.w = param(rng, (d_in, d_out), scale=1.0 / np.sqrt(d_in), dtype=dtype)
            self.b = Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(d), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(d), requires_grad=True, dtype=dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)
