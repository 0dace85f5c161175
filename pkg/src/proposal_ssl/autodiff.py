"""Minimal reverse-mode autodiff on numpy float64 buffers.

Only the primitives the encoder and the training losses need are provided.
Everything is double precision; gradients are checked against central
differences (see :func:`grad_check`).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamGroup",
    "GraphError",
    "BatchNormState",
    "constant",
    "concat",
    "linear",
    "batch_norm",
    "grad_check",
]


class GraphError(ValueError):
    """Raised when a primitive is applied to incompatible shapes."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
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
    """A value in the computation graph with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward: Callable | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # graph plumbing

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-accumulate gradients from this scalar node."""
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar node, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # ------------------------------------------------------------------
    # elementwise arithmetic (broadcasting)

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else constant(other)
        out_data = self.data + other.data
        req = self.requires_grad or other.requires_grad

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor(out_data, req, (self, other), bwd if req else None)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else constant(other)
        return self + (-other)

    def __rsub__(self, other):
        return constant(other) + (-self)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else constant(other)
        out_data = self.data * other.data
        req = self.requires_grad or other.requires_grad

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor(out_data, req, (self, other), bwd if req else None)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else constant(other)
        out_data = self.data / other.data
        req = self.requires_grad or other.requires_grad

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * self.data / other.data ** 2,
                                               other.data.shape))

        return Tensor(out_data, req, (self, other), bwd if req else None)

    # ------------------------------------------------------------------
    # matrix / reduction primitives

    def matmul(self, other: "Tensor") -> "Tensor":
        if self.data.shape[-1] != other.data.shape[-2 if other.data.ndim > 1 else 0]:
            raise GraphError(
                f"matmul shape mismatch: {self.data.shape} @ {other.data.shape}")
        out_data = np.matmul(self.data, other.data)
        req = self.requires_grad or other.requires_grad

        def bwd(g):
            if self.requires_grad:
                ga = np.matmul(g, np.swapaxes(other.data, -1, -2))
                self._accumulate(_unbroadcast(ga, self.data.shape))
            if other.requires_grad:
                gb = np.matmul(np.swapaxes(self.data, -1, -2), g)
                other._accumulate(_unbroadcast(gb, other.data.shape))

        return Tensor(out_data, req, (self, other), bwd if req else None)

    __matmul__ = matmul

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        req = self.requires_grad

        def bwd(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            self._accumulate(np.broadcast_to(gg, self.data.shape).copy())

        return Tensor(out_data, req, (self,), bwd if req else None)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max_along(self, axis: int) -> "Tensor":
        """Max reduction; backward routes to the first max (lowest index)."""
        out_data = self.data.max(axis=axis)
        idx = self.data.argmax(axis=axis)
        req = self.requires_grad

        def bwd(g):
            full = np.zeros_like(self.data)
            np.put_along_axis(full, np.expand_dims(idx, axis),
                              np.expand_dims(g, axis), axis=axis)
            self._accumulate(full)

        return Tensor(out_data, req, (self,), bwd if req else None)

    def gather(self, rows) -> "Tensor":
        """Index rows along axis 0; `rows` may be any integer array."""
        rows = np.asarray(rows, dtype=np.int64)
        out_data = self.data[rows]
        req = self.requires_grad

        def bwd(g):
            full = np.zeros_like(self.data)
            np.add.at(full, rows, g)
            self._accumulate(full)

        return Tensor(out_data, req, (self,), bwd if req else None)

    # ------------------------------------------------------------------
    # nonlinearities

    def relu(self) -> "Tensor":
        out_data = np.maximum(self.data, 0.0)
        req = self.requires_grad

        def bwd(g):
            # subgradient at 0 is 0
            self._accumulate(g * (self.data > 0.0))

        return Tensor(out_data, req, (self,), bwd if req else None)

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        req = self.requires_grad

        def bwd(g):
            self._accumulate(g * out_data)

        return Tensor(out_data, req, (self,), bwd if req else None)

    def log(self) -> "Tensor":
        out_data = np.log(self.data)
        req = self.requires_grad

        def bwd(g):
            self._accumulate(g / self.data)

        return Tensor(out_data, req, (self,), bwd if req else None)

    def softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)
        req = self.requires_grad

        def bwd(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            self._accumulate(out_data * (g - dot))

        return Tensor(out_data, req, (self,), bwd if req else None)

    def l2_normalize(self, axis: int = -1) -> "Tensor":
        norm = np.sqrt((self.data ** 2).sum(axis=axis, keepdims=True))
        out_data = self.data / norm
        req = self.requires_grad

        def bwd(g):
            dot = (g * self.data).sum(axis=axis, keepdims=True)
            self._accumulate(g / norm - self.data * dot / norm ** 3)

        return Tensor(out_data, req, (self,), bwd if req else None)

    def stop_gradient(self) -> "Tensor":
        """Forward passthrough that blocks all gradient flow."""
        return Tensor(self.data.copy())

    def transpose(self) -> "Tensor":
        out_data = np.swapaxes(self.data, -1, -2)
        req = self.requires_grad

        def bwd(g):
            self._accumulate(np.swapaxes(g, -1, -2))

        return Tensor(out_data, req, (self,), bwd if req else None)

    def reshape(self, *shape) -> "Tensor":
        out_data = self.data.reshape(*shape)
        req = self.requires_grad

        def bwd(g):
            self._accumulate(g.reshape(self.data.shape))

        return Tensor(out_data, req, (self,), bwd if req else None)


def constant(data) -> Tensor:
    """A graph leaf that never receives a gradient."""
    return Tensor(data, requires_grad=False)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    req = any(t.requires_grad for t in tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor(out_data, req, tuple(tensors), bwd if req else None)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b). `w` is (in, out), `b` is (out,)."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise GraphError(
            f"linear shape mismatch: input {x.data.shape} vs weight {w.data.shape}")
    out = x.matmul(w)
    if b is not None:
        out = out + b
    return out


class BatchNormState:
    """Running statistics for a batch-norm layer (momentum 0.9)."""

    def __init__(self, num_features: int, momentum: float = 0.9, eps: float = 1e-8):
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               state: BatchNormState, mode: str = "train") -> Tensor:
    """Batch normalization over axis 0 of a 2-D input."""
    if x.data.ndim != 2:
        raise GraphError(f"batch_norm expects 2-D input, got shape {x.data.shape}")
    if mode == "train":
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mu
        state.running_var = state.momentum * state.running_var + (1 - state.momentum) * var
    elif mode == "eval":
        mu = state.running_mean
        var = state.running_var
    else:
        raise ValueError(f"unknown batch_norm mode: {mode!r}")

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv_std
    out_data = xhat * gamma.data + beta.data
    req = x.requires_grad or gamma.requires_grad or beta.requires_grad

    def bwd(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=0))
        if x.requires_grad:
            if mode == "train":
                b = x.data.shape[0]
                gxh = g * gamma.data
                dx = (inv_std / b) * (b * gxh - gxh.sum(axis=0)
                                      - xhat * (gxh * xhat).sum(axis=0))
            else:
                dx = g * gamma.data * inv_std
            x._accumulate(dx)

    return Tensor(out_data, req, (x, gamma, beta), bwd if req else None)


# ----------------------------------------------------------------------
# parameters


class ParamGroup:
    """Named map of trainable tensors with uniform fan-in initialization."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, shape: tuple, rng: np.random.Generator,
            fan_in: int | None = None, trainable: bool = True,
            zero: bool = False) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        if zero:
            data = np.zeros(shape)
        else:
            fi = fan_in if fan_in is not None else (shape[0] if len(shape) > 1 else shape[0])
            bound = 1.0 / np.sqrt(max(fi, 1))
            data = rng.uniform(-bound, bound, size=shape)
        t = Tensor(data, requires_grad=trainable)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def add_tensor(self, name: str, t: Tensor, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def trainable_items(self) -> Iterable[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._params.items() if self._trainable[n])

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()


# ----------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               eps: float = 1e-6) -> float:
    """Compare reverse-mode gradients of `f` at `x` with central differences.

    Returns the max over elements of |a - n| / max(1e-12, |a| + |n|).
    """
    if not (1e-7 <= eps <= 1e-4):
        raise ValueError(f"eps out of supported range: {eps}")
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite forward value in grad_check")
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2 * eps)

    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
