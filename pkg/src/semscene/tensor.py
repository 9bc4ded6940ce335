"""Dense float64 tensors with a dynamic reverse-mode tape.

Every value flowing through the networks is a :class:`Tensor`: a contiguous
float64 numpy buffer in channels-first layout ([C, H, W] for images,
[C, Dx, Dy, Dz] for volumes) plus an optional gradient buffer of the same
shape.  Operations record a tape node per result; ``Tensor.backward`` on a
scalar walks the tape in reverse topological order and accumulates gradients
into every participating tensor that requires them.

The operation set is deliberately small: exactly what the network blocks
need.  Composite layers (convolution, pooling, projection scatter) build
their own nodes via :func:`make_op`.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array plus an optional accumulated gradient of equal shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate grads of all tape ancestors.  Repeated calls accumulate:
        each call adds one more full gradient of this output."""
        if self.data.size != 1:
            raise ContractViolation(
                f"backward() requires a scalar output, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        # Propagate this pass into clean buffers, then fold previously
        # accumulated grads back in, so earlier passes are never re-propagated.
        stashed: dict[int, np.ndarray] = {}
        for node in topo:
            if node.grad is not None:
                stashed[id(node)] = node.grad
                node.grad = None
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in topo:
            prev = stashed.get(id(node))
            if prev is not None:
                if node.grad is None:
                    node.grad = prev
                else:
                    node.grad += prev

    # Convenience arithmetic used throughout the network code.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def make_op(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    """Create a tape node.  ``backward`` receives the output gradient and must
    call ``accumulate_grad`` on whichever parents require gradients."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return make_op(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return make_op(out_data, (a, b), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        x.accumulate_grad(g.reshape(x.shape))

    return make_op(out_data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out_data = np.maximum(x.data, 0.0)

    def backward(g):
        x.accumulate_grad(g * (x.data > 0.0))

    return make_op(out_data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # Split by sign so exp never overflows.
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward(g):
        x.accumulate_grad(g * out_data * (1.0 - out_data))

    return make_op(out_data, (x,), backward)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractViolation(f"unknown activation kind {kind!r}")


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax along axis 0 (the channel axis), max-subtracted for overflow safety."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=0, keepdims=True)
        x.accumulate_grad(out_data * (g - dot))

    return make_op(out_data, (x,), backward)


def tensor_sum(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out_data = np.asarray(x.data.sum())

    def backward(g):
        x.accumulate_grad(np.full_like(x.data, float(g.reshape(()))))

    return make_op(out_data, (x,), backward)


def tensor_mean(x: Tensor) -> Tensor:
    return mul(tensor_sum(x), 1.0 / x.size)


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractViolation("concat_channels of an empty sequence")
    tails = {p.shape[1:] for p in parts}
    if len(tails) != 1:
        raise ContractViolation(f"concat_channels with mixed spatial extents {tails}")
    out_data = np.concatenate([p.data for p in parts], axis=0)
    splits = np.cumsum([p.shape[0] for p in parts])[:-1]

    def backward(g):
        for p, gp in zip(parts, np.split(g, splits, axis=0)):
            if p.requires_grad:
                p.accumulate_grad(gp)

    return make_op(out_data, tuple(parts), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor upsampling of every spatial axis by an integer factor."""
    x = as_tensor(x)
    if factor < 1:
        raise ContractViolation(f"upsample factor must be >= 1, got {factor}")
    out_data = x.data
    n_spatial = x.data.ndim - 1
    for axis in range(1, n_spatial + 1):
        out_data = np.repeat(out_data, factor, axis=axis)

    def backward(g):
        gg = g
        # Fold each upsampled axis back into (extent, factor) blocks and sum.
        for axis in range(1, n_spatial + 1):
            shape = gg.shape[:axis] + (gg.shape[axis] // factor, factor) + gg.shape[axis + 1:]
            gg = gg.reshape(shape).sum(axis=axis + 1)
        x.accumulate_grad(gg)

    return make_op(out_data, (x,), backward)


def assert_finite(x: Tensor | np.ndarray, where: str) -> None:
    data = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(data)):
        from .errors import NumericalFailure
        bad = np.argwhere(~np.isfinite(data))[0]
        raise NumericalFailure(f"non-finite value in {where} at index {tuple(bad)}")
