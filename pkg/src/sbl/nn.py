"""Minimal module system on top of the autodiff tensors."""
from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[full] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)


class RngStream:
    """Mutable holder so every dropout site draws from one seeded generator."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return nx.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = xavier(rng, d_in, d_out)
        self.bias = nx.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = nx.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        self.gain = nx.parameter(np.ones(d))
        self.bias = nx.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return nx.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, vocab: int, d: int, rng: np.random.Generator):
        self.weight = nx.parameter(rng.normal(0.0, d**-0.5, size=(vocab, d)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return nx.take(self.weight, np.asarray(ids, dtype=np.int64))


class Dropout(Module):
    def __init__(self, p: float, stream: RngStream):
        self.p = p
        self.stream = stream

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.p <= 0.0:
            return x
        return nx.dropout(x, self.p, self.stream.rng)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.inner = Linear(d_model, d_ff, rng)
        self.outer = Linear(d_ff, d_model, rng)

    def __call__(self, x):
        return self.outer(nx.relu(self.inner(x)))
