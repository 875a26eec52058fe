"""Small module system on top of :mod:`chart2dsl.numerics`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .numerics import Tensor, dropout, gelu, layer_norm, linear
from .numerics import tensor as T


class Module:
    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.name is not None:  # only registered parameters carry a name
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix.rstrip("."), self
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.modules(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.modules(f"{prefix}{key}.{i}.")

    def train(self, mode: bool = True) -> Module:
        for _, m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)


def param(data, name: str = "param") -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Linear(Module):
    """``y = x @ W + b`` with ``W`` shaped (in, out); may carry a LoRA adapter."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = param(rng.normal(0.0, std, size=(d_in, d_out)), "weight")
        self.bias = param(np.zeros(d_out), "bias") if bias else None
        self.adapter = None  # set by lora.attach

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if self.adapter is not None and not self.adapter.merged:
            from .lora import forward_adapted
            return forward_adapted(x, self.weight, self.adapter, self.bias)
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = param(np.ones(d), "gamma")
        self.beta = param(np.zeros(d), "beta")

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    """Two linear layers with a GELU in between; hidden width ``mult * d``."""

    def __init__(self, d: int, rng: np.random.Generator, mult: int = 4, dropout_rate: float = 0.1):
        self.fc1 = Linear(d, mult * d, rng)
        self.fc2 = Linear(mult * d, d, rng)
        self.dropout_rate = dropout_rate

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = gelu(self.fc1(x))
        h = dropout(h, self.dropout_rate, rng, self.training)
        return self.fc2(h)


def sinusoidal(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


class SelfAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, causal: bool = False, cache: dict | None = None) -> Tensor:
        """Attention over ``x`` (B, N, d).

        With ``cache`` the call appends this step's keys and values to it and
        attends over everything cached so far (incremental decoding).
        """
        b, n, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        if cache is not None:
            if "k" in cache:
                k = T.concat([cache["k"], k], axis=2)
                v = T.concat([cache["v"], v], axis=2)
            cache["k"], cache["v"] = k, v
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // self.heads))
        if causal and n > 1:
            total = k.shape[2]
            offset = total - n
            blocked = np.triu(np.ones((n, total), dtype=bool), k=offset + 1)
            scores = scores + np.where(blocked, -1e30, 0.0)
        att = T.softmax(scores, axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.o(out)
