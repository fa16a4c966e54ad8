"""Neural network building blocks on top of the autodiff kernel.

Every layer is a ``Module`` owning named ``Param`` leaves. Parameter ids
are path-like strings (``"encoder.gru.wx"``) assembled by ``Module.params()``
so that checkpoints have a stable, human-readable manifest.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Tensor, concat, gru_cell, layer_norm, softmax


class Param:
    """A trainable leaf: a tensor plus the id it is checkpointed under."""

    __slots__ = ("t", "name")

    def __init__(self, data: np.ndarray, name: str = ""):
        self.t = Tensor(data, requires_grad=True)
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.t.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.t.data = np.asarray(value, dtype=self.t.data.dtype)

    @property
    def grad(self):
        return self.t.grad

    def zero_grad(self) -> None:
        self.t.grad = None

    def __repr__(self) -> str:
        return f"Param({self.name or '?'}, shape={self.t.data.shape})"


class Module:
    """Base class: recursive parameter discovery over attributes."""

    def params(self, prefix: str = "") -> dict[str, Param]:
        out: dict[str, Param] = {}
        for key, val in vars(self).items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Param):
                val.name = path
                out[path] = val
            elif isinstance(val, Module):
                out.update(val.params(path))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.params(f"{path}.{i}"))
                    elif isinstance(item, Param):
                        item.name = f"{path}.{i}"
                        out[f"{path}.{i}"] = item
        return out

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.zero_grad()

    def param_tensors(self) -> Iterator[Tensor]:
        for p in self.params().values():
            yield p.t


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 bias: bool = True, zero_init: bool = False):
        w = np.zeros((d_in, d_out)) if zero_init else _glorot(rng, d_in, d_out)
        self.w = Param(w)
        self.b = Param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w.t
        if self.b is not None:
            y = y + self.b.t
        return y


class MLP(Module):
    """Stack of affine layers with ReLU between (none after the last)."""

    def __init__(self, rng: np.random.Generator, dims: list[int], zero_init_last: bool = False):
        self.layers = [
            Linear(rng, dims[i], dims[i + 1],
                   zero_init=(zero_init_last and i == len(dims) - 2))
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x


class LayerNorm(Module):
    def __init__(self, d: int):
        self.w = Param(np.ones(d))
        self.b = Param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.w.t, self.b.t)


class Conv1dSame(Module):
    """Width-3 temporal convolution with same-length zero padding.

    Input (..., T, d_in) -> output (..., T, d_out). Implemented as three
    shifted matmuls, which keeps the whole op inside BLAS.
    """

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.w_prev = Param(_glorot(rng, d_in, d_out) / math.sqrt(3.0))
        self.w_curr = Param(_glorot(rng, d_in, d_out) / math.sqrt(3.0))
        self.w_next = Param(_glorot(rng, d_in, d_out) / math.sqrt(3.0))
        self.b = Param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        T = x.shape[-2]
        y = x @ self.w_curr.t + self.b.t
        if T > 1:
            prev = x[..., :-1, :] @ self.w_prev.t
            nxt = x[..., 1:, :] @ self.w_next.t
            pad = list(x.shape[:-2])
            zp = Tensor(np.zeros(pad + [1, prev.shape[-1]]))
            y = y + concat([zp, prev], axis=-2) + concat([nxt, zp], axis=-2)
        return y


class GRU(Module):
    """Unidirectional GRU over the second-to-last axis; returns the last state."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_h: int):
        self.wx = Param(_glorot(rng, d_in, 3 * d_h, (d_in, 3 * d_h)))
        self.wh = Param(_glorot(rng, d_h, 3 * d_h, (d_h, 3 * d_h)))
        self.bx = Param(np.zeros(3 * d_h))
        self.bh = Param(np.zeros(3 * d_h))
        self.d_h = d_h

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-2]
        T = x.shape[-2]
        h = Tensor(np.zeros(lead + (self.d_h,)))
        for t in range(T):
            h = gru_cell(x[..., t, :], h, self.wx.t, self.wh.t, self.bx.t, self.bh.t)
        return h


class MultiHeadSelfAttention(Module):
    """Single-layer masked multi-head self-attention with a residual.

    ``mask`` is a boolean (..., N) array of valid positions; invalid keys
    receive -inf logits and invalid query rows are zeroed on output.
    """

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int):
        if d % n_heads:
            raise ValueError("model width must divide evenly across heads")
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, d, d)
        self.wv = Linear(rng, d, d)
        self.wo = Linear(rng, d, d)
        self.norm = LayerNorm(d)
        self.n_heads = n_heads
        self.d_head = d // n_heads

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        lead = x.shape[:-2]
        n = x.shape[-2]
        H, dh = self.n_heads, self.d_head

        def split_heads(t: Tensor) -> Tensor:
            return t.reshape(lead + (n, H, dh)).swapaxes(-3, -2)  # (..., H, N, dh)

        q, k, v = split_heads(self.wq(x)), split_heads(self.wk(x)), split_heads(self.wv(x))
        logits = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))  # (..., H, N, N)
        key_mask = mask[..., None, None, :]  # broadcast over heads and queries
        bias = np.where(key_mask, 0.0, -1e30)
        att = softmax(logits + Tensor(np.broadcast_to(bias, logits.shape).copy()), axis=-1)
        out = att @ v  # (..., H, N, dh)
        out = out.swapaxes(-3, -2).reshape(lead + (n, H * dh))
        out = self.wo(out) * Tensor(mask[..., None].astype(x.data.dtype))
        return self.norm(x + out)
