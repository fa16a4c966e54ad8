"""Reverse-mode automatic differentiation on dense numpy arrays.

A small eager autodiff kernel in the micrograd style: every operation
builds a node holding its output array, its parent nodes, and a closure
that routes the upstream gradient to the parents. ``backward()`` on a
scalar runs the closures in reverse topological order. Arrays stay in
float64 by default (``set_default_dtype`` switches training builds to
float32).

Gradients on leaves accumulate across backward calls until cleared,
matching the usual optimizer contract.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / frozen paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple = ()

    # -- graph plumbing ----------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros(self.data.shape, dtype=self.data.dtype)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar; leaf grads accumulate until cleared."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            return
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accum(np.ones(self.data.shape, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- basics ------------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        data = self.data + o.data

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if o.requires_grad:
                o._accum(_unbroadcast(g, o.data.shape))

        return Tensor._make(data, (self, o), bw)

    __radd__ = __add__

    def __neg__(self):
        data = -self.data

        def bw(g):
            self._accum(-g)

        return Tensor._make(data, (self,), bw)

    def __sub__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        data = self.data - o.data

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if o.requires_grad:
                o._accum(_unbroadcast(-g, o.data.shape))

        return Tensor._make(data, (self, o), bw)

    def __rsub__(self, other):
        return Tensor(other) - self

    def __mul__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        data = self.data * o.data

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * o.data, self.data.shape))
            if o.requires_grad:
                o._accum(_unbroadcast(g * self.data, o.data.shape))

        return Tensor._make(data, (self, o), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        data = self.data / o.data

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / o.data, self.data.shape))
            if o.requires_grad:
                o._accum(_unbroadcast(-g * data / o.data, o.data.shape))

        return Tensor._make(data, (self, o), bw)

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __pow__(self, p: float):
        data = self.data ** p

        def bw(g):
            self._accum(g * p * self.data ** (p - 1))

        return Tensor._make(data, (self,), bw)

    def __matmul__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        data = self.data @ o.data

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g @ np.swapaxes(o.data, -1, -2), self.data.shape))
            if o.requires_grad:
                o._accum(_unbroadcast(np.swapaxes(self.data, -1, -2) @ g, o.data.shape))

        return Tensor._make(data, (self, o), bw)

    # -- elementwise nonlinearities -----------------------------------------

    def exp(self):
        data = np.exp(self.data)

        def bw(g):
            self._accum(g * data)

        return Tensor._make(data, (self,), bw)

    def log(self):
        data = np.log(self.data)

        def bw(g):
            self._accum(g / self.data)

        return Tensor._make(data, (self,), bw)

    def sqrt(self):
        data = np.sqrt(self.data)

        def bw(g):
            self._accum(g * 0.5 / data)

        return Tensor._make(data, (self,), bw)

    def tanh(self):
        data = np.tanh(self.data)

        def bw(g):
            self._accum(g * (1.0 - data * data))

        return Tensor._make(data, (self,), bw)

    def sigmoid(self):
        data = 1.0 / (1.0 + np.exp(-self.data))

        def bw(g):
            self._accum(g * data * (1.0 - data))

        return Tensor._make(data, (self,), bw)

    def relu(self):
        data = np.maximum(self.data, 0.0)

        def bw(g):
            # subgradient 0 at the kink
            self._accum(g * (self.data > 0.0))

        return Tensor._make(data, (self,), bw)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape).copy())

        return Tensor._make(np.asarray(data), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int, keepdims: bool = False):
        data = self.data.max(axis=axis, keepdims=keepdims)

        def bw(g):
            full = data if keepdims else np.expand_dims(data, axis)
            mask = (self.data == full).astype(self.data.dtype)
            mask /= mask.sum(axis=axis, keepdims=True)
            gg = g if keepdims else np.expand_dims(g, axis)
            self._accum(mask * gg)

        return Tensor._make(np.asarray(data), (self,), bw)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)
        src_shape = self.data.shape

        def bw(g):
            self._accum(g.reshape(src_shape))

        return Tensor._make(data, (self,), bw)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        data = self.data.transpose(axes)
        inv = np.argsort(axes)

        def bw(g):
            self._accum(g.transpose(inv))

        return Tensor._make(data, (self,), bw)

    def swapaxes(self, a: int, b: int):
        data = np.swapaxes(self.data, a, b)

        def bw(g):
            self._accum(np.swapaxes(g, a, b))

        return Tensor._make(data, (self,), bw)

    def __getitem__(self, idx):
        data = self.data[idx]

        def bw(g):
            buf = np.zeros(self.data.shape, dtype=self.data.dtype)
            np.add.at(buf, idx, g)
            self._accum(buf)

        return Tensor._make(data, (self,), bw)

    def take_along_axis(self, indices: np.ndarray, axis: int):
        data = np.take_along_axis(self.data, indices, axis=axis)

        def bw(g):
            # scatter-add along `axis` (put_along_axis overwrites, so build a fancy index)
            buf = np.zeros(self.data.shape, dtype=self.data.dtype)
            idx = list(np.meshgrid(*[np.arange(s) for s in indices.shape], indexing="ij"))
            idx[axis] = indices
            np.add.at(buf, tuple(idx), g)
            self._accum(buf)

        return Tensor._make(data, (self,), bw)

    def cumsum(self, axis: int):
        data = np.cumsum(self.data, axis=axis)

        def bw(g):
            self._accum(np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))

        return Tensor._make(data, (self,), bw)

    def broadcast_to(self, shape):
        data = np.broadcast_to(self.data, shape).copy()
        src = self.data.shape

        def bw(g):
            self._accum(_unbroadcast(g, src))

        return Tensor._make(data, (self,), bw)


# -- free functions ---------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t._accum(p)

    return Tensor._make(data, tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        parts = np.split(g, len(tensors), axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t._accum(np.squeeze(p, axis=axis))

    return Tensor._make(data, tuple(tensors), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        x._accum(data * (g - dot))

    return Tensor._make(data, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def bw(g):
        p = np.exp(data)
        x._accum(g - p * g.sum(axis=axis, keepdims=True))

    return Tensor._make(data, (x,), bw)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * weight.data + bias.data

    def bw(g):
        if weight.requires_grad:
            weight._accum(_unbroadcast(g * xhat, weight.data.shape))
        if bias.requires_grad:
            bias._accum(_unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            dxhat = g * weight.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accum(inv * (dxhat - m1 - xhat * m2))

    return Tensor._make(data, (x, weight, bias), bw)


def gru_cell(x: Tensor, h: Tensor, wx: Tensor, wh: Tensor, bx: Tensor, bh: Tensor) -> Tensor:
    """One step of a standard GRU (update/reset gates + candidate).

    Gate layout along the last axis of the weights is [z, r, n].
    """
    d = h.data.shape[-1]
    gx = x.data @ wx.data + bx.data
    gh = h.data @ wh.data + bh.data
    xz, xr, xn = gx[..., :d], gx[..., d:2 * d], gx[..., 2 * d:]
    hz, hr, hn = gh[..., :d], gh[..., d:2 * d], gh[..., 2 * d:]
    z = 1.0 / (1.0 + np.exp(-(xz + hz)))
    r = 1.0 / (1.0 + np.exp(-(xr + hr)))
    n = np.tanh(xn + r * hn)
    data = (1.0 - z) * n + z * h.data

    def bw(g):
        dn = g * (1.0 - z)
        dz = g * (h.data - n)
        dn_pre = dn * (1.0 - n * n)
        dz_pre = dz * z * (1.0 - z)
        dr = dn_pre * hn
        dr_pre = dr * r * (1.0 - r)
        dgx = np.concatenate([dz_pre, dr_pre, dn_pre], axis=-1)
        dgh = np.concatenate([dz_pre, dr_pre, dn_pre * r], axis=-1)
        if x.requires_grad:
            x._accum(dgx @ wx.data.T)
        if wx.requires_grad:
            wx._accum(_unbroadcast(np.swapaxes(x.data, -1, -2) @ dgx, wx.data.shape)
                      if x.data.ndim > 2 else x.data.T @ dgx)
        if bx.requires_grad:
            bx._accum(dgx.reshape(-1, dgx.shape[-1]).sum(axis=0))
        if h.requires_grad:
            h._accum(dgh @ wh.data.T + g * z)
        if wh.requires_grad:
            wh._accum(_unbroadcast(np.swapaxes(h.data, -1, -2) @ dgh, wh.data.shape)
                      if h.data.ndim > 2 else h.data.T @ dgh)
        if bh.requires_grad:
            bh._accum(dgh.reshape(-1, dgh.shape[-1]).sum(axis=0))

    return Tensor._make(data, (x, h, wx, wh, bx, bh), bw)


def external_grad_op(x: Tensor, value: float, grad: np.ndarray) -> Tensor:
    """Wrap an externally computed scalar function of ``x`` as a graph node.

    ``value`` and ``grad`` must be the function's value and its gradient
    evaluated at ``x.data``; backward injects ``upstream * grad``.
    """
    data = np.asarray(value, dtype=x.data.dtype)
    grad = np.asarray(grad, dtype=x.data.dtype)

    def bw(g):
        x._accum(g * grad)

    return Tensor._make(data, (x,), bw)


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty: quadratic inside ``beta``, linear outside."""
    inside = (np.abs(x.data) < beta).astype(x.data.dtype)
    sign = np.sign(x.data)
    quad = x * x * (0.5 / beta)
    lin = x * Tensor(sign) - 0.5 * beta
    return quad * Tensor(inside) + lin * Tensor(1.0 - inside)


def stop_gradient(x: Tensor) -> Tensor:
    """Value-identical tensor through which no gradient flows."""
    return x.detach()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def assert_finite(x: Tensor | np.ndarray, what: str = "tensor") -> None:
    data = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values in {what}")
