"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array and, when it takes part in a
computation that requires gradients, records its parents and a closure
that pushes an upstream gradient back to them.  ``backward`` walks the
graph in reverse topological order.

Only the operators the losses and networks of this package need are
provided; every one of them is covered by finite-difference tests.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "concat",
    "exp",
    "log",
    "logsumexp",
    "relu",
    "safe_sqrt",
    "sigmoid",
    "softplus",
    "sqdist",
    "where_const",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    # numpy must defer to our reflected operators
    __array_priority__ = 1000

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
        name: str | None = None,
    ) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic protocol ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + grad

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad.

        Intermediate gradients are released once consumed; leaf gradients
        are added to whatever is already stored (callers clear them).
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        out = a.data + b.data

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return _node(out, (a, b), back)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return _node(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return _node(a.data - b.data, (a, b), back)

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return _node(a.data * b.data, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return _node(a.data / b.data, (a, b), back)

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def back(g):
            return g @ b.data.T, a.data.T @ g

        return _node(a.data @ b.data, (a, b), back)

    def square(self) -> "Tensor":
        x = self
        return _node(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))

    # -- reductions and indexing ----------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        x = self
        out = x.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return _node(out, (x,), back)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def __getitem__(self, index) -> "Tensor":
        x = self

        def back(g):
            full = np.zeros_like(x.data)
            np.add.at(full, index, g)
            return (full,)

        return _node(x.data[index], (x,), back)

    @property
    def T(self) -> "Tensor":
        return _node(self.data.T, (self,), lambda g: (g.T,))

    def reshape(self, *shape) -> "Tensor":
        x = self
        return _node(x.data.reshape(*shape), (x,), lambda g: (g.reshape(x.shape),))


def _node(data: np.ndarray, parents: Sequence[Tensor], back) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), back)
    return Tensor(data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise functions ----------------------------------------------------


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    slope = sigmoid(Tensor(x.data)).data
    return _node(out, (x,), lambda g: (g * slope,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def safe_sqrt(x: Tensor) -> Tensor:
    """Square root whose gradient is taken as zero at exactly zero."""
    out = np.sqrt(np.maximum(x.data, 0.0))

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _node(out, (x,), back)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    peak = x.data.max(axis=axis, keepdims=True)
    shifted = np.exp(x.data - peak)
    total = shifted.sum(axis=axis, keepdims=True)
    out = np.log(total) + peak
    soft = shifted / total
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _node(out, (x,), back)


def sqdist(a: Tensor, b: Tensor, exact: bool = True) -> Tensor:
    """Pairwise squared Euclidean distances between rows of ``a`` and ``b``.

    With ``exact`` the values come from explicit differences, so they are
    exactly non-negative and exactly zero for identical rows.  Otherwise the
    expansion ``|a|^2 + |b|^2 - 2 a.b`` is used (clipped at zero), which is
    much cheaper for large operands.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"sqdist expects (m, d) and (n, d), got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if exact:
        diff = ad[:, None, :] - bd[None, :, :]
        out = np.einsum("ijk,ijk->ij", diff, diff)
    else:
        out = np.einsum("ij,ij->i", ad, ad)[:, None] + np.einsum("ij,ij->i", bd, bd)[None, :] - 2.0 * (ad @ bd.T)
        np.maximum(out, 0.0, out=out)

    def back(g):
        ga = 2.0 * (g.sum(axis=1)[:, None] * ad - g @ bd)
        gb = 2.0 * (g.sum(axis=0)[:, None] * bd - g.T @ ad)
        return ga, gb

    return _node(out, (a, b), back)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(out, tuple(parts), back)


def where_const(mask: np.ndarray, x: Tensor, fill: float = 0.0) -> Tensor:
    """Keep ``x`` where ``mask`` holds, constant ``fill`` elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    return _node(np.where(mask, x.data, fill), (x,), lambda g: (g * mask,))
