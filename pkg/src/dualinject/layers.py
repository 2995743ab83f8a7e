"""Parameterized building blocks: LoRA-capable linear maps and convolutions."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter container: walks attributes to name every tensor."""

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_tensors(name + ".")
            elif isinstance(val, (list, tuple)):
                name = name[:-1] if name.endswith("s") else name
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{name}{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}{i}", item

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def parameters(self) -> list[Tensor]:
        return [t for t in self.tensors() if t.requires_grad]


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Linear(Module):
    """``y = x W_eff^T + b`` with ``W_eff = W + (alpha/r) B A``.

    The base weight is frozen. ``loraA`` is ``r x in`` and ``loraB`` is
    ``out x r``, zero-initialized so a fresh adapter leaves the map unchanged.
    """

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = False,
                 rank: int = 0, alpha: float | None = None, std: float | None = None,
                 weight: np.ndarray | None = None, trainable: bool = False):
        w = weight if weight is not None else _normal(rng, (d_out, d_in), std if std is not None else 1 / math.sqrt(d_in))
        self.W = Tensor(np.array(w, dtype=np.float32), requires_grad=trainable)
        self.b = Tensor(np.zeros(d_out, np.float32), requires_grad=trainable) if bias else None
        self.d_in, self.d_out = d_in, d_out
        self.rank = rank
        if rank > 0:
            bound = 1 / math.sqrt(d_in)
            self.loraA = Tensor(rng.uniform(-bound, bound, (rank, d_in)).astype(np.float32), requires_grad=True)
            self.loraB = Tensor(np.zeros((d_out, rank), np.float32), requires_grad=True)
            self._scale = (alpha if alpha is not None else rank) / rank
        else:
            self.loraA = self.loraB = None
            self._scale = 0.0

    def effective_weight(self) -> Tensor:
        if self.loraA is None:
            return self.W
        return self.W + T.matmul(self.loraB, self.loraA) * self._scale

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise T.ShapeError(f"Linear: input width {x.shape[-1]} vs expected {self.d_in}")
        y = T.matmul(x, T.transpose(self.effective_weight(), (1, 0)))
        if self.b is not None:
            y = y + T.expand(T.reshape(self.b, (1,) * (y.ndim - 1) + (self.d_out,)), y.shape)
        return y


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                 padding: int | None = None, bias: bool = True, std: float | None = None,
                 trainable: bool = False):
        fan_in = c_in * k * k
        self.W = Tensor(_normal(rng, (c_out, c_in, k, k), std if std is not None else 1 / math.sqrt(fan_in)),
                        requires_grad=trainable)
        self.b = Tensor(np.zeros(c_out, np.float32), requires_grad=trainable) if bias else None
        self._stride = stride
        self._padding = k // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.W, self.b, stride=self._stride, padding=self._padding)


def sinusoidal_embedding(positions: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    """Standard sin/cos embedding, one row per position value."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(base) * np.arange(half) / half)
    ang = positions[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(positions), 1))], axis=1)
    return emb.astype(np.float32)


def grid_position_embedding(h: int, w: int, dim: int) -> np.ndarray:
    """2-D sinusoidal embedding for an ``h x w`` token grid, row-major, ``[h*w, dim]``."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    half = dim // 2
    # scale so neighbouring tokens are well separated at the coarse frequencies
    ey = sinusoidal_embedding(ys.reshape(-1) * 4.0, half, base=100.0)
    ex = sinusoidal_embedding(xs.reshape(-1) * 4.0, dim - half, base=100.0)
    return np.concatenate([ey, ex], axis=1)
