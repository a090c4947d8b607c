"""Dense-tensor reverse-mode automatic differentiation.

Small numpy-backed engine: each op records its parents and a backward
closure; ``Tensor.backward()`` topologically sorts the graph and
accumulates gradients into every reachable leaf that requires them.
All data is float64 so analytic gradients can be checked against
central finite differences at tight tolerances.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
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
    """N-dimensional value participating in a reverse-mode graph.

    `data` is always a float64 ndarray. `requires_grad` marks trainable
    leaves; interior nodes inherit it from their parents so backward can
    skip constant subgraphs.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward_fn: Callable[[np.ndarray], None] | None = None,
        _op: str = "",
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._op = _op

    # ------------------------------------------------------------------
    # basic properties

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # ------------------------------------------------------------------
    # graph machinery

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def topo_order(self) -> list["Tensor"]:
        """Nodes reachable from self, parents before children."""
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
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into `.grad` of every reachable leaf.

        Only defined for scalar outputs; anything else is rejected.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        self._accumulate(np.ones_like(self.data))
        for node in reversed(self.topo_order()):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # ------------------------------------------------------------------
    # arithmetic

    @staticmethod
    def _lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    def __add__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        return _binary(
            self, other, self.data + other.data, "add",
            lambda g: g, lambda g: g,
        )

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        return _binary(
            self, other, self.data * other.data, "mul",
            lambda g: g * other.data, lambda g: g * self.data,
        )

    __rmul__ = __mul__

    def __sub__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        return _binary(
            self, other, self.data - other.data, "sub",
            lambda g: g, lambda g: -g,
        )

    def __rsub__(self, other) -> "Tensor":
        return Tensor._lift(other) - self

    def __truediv__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        return _binary(
            self, other, self.data / other.data, "div",
            lambda g: g / other.data,
            lambda g: -g * self.data / (other.data * other.data),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor._lift(other) / self

    def __neg__(self) -> "Tensor":
        return _unary(self, -self.data, "neg", lambda g: -g)

    def __pow__(self, exponent) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data ** exponent
        return _unary(
            self, out_data, f"pow{exponent}",
            lambda g: g * exponent * self.data ** (exponent - 1),
        )

    def __matmul__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ValueError(
                f"matmul expects 2-D operands, got {self.shape} @ {other.shape}"
            )
        return _binary(
            self, other, self.data @ other.data, "matmul",
            lambda g: g @ other.data.T,
            lambda g: self.data.T @ g,
        )

    def __getitem__(self, index) -> "Tensor":
        out_data = self.data[index]

        def backward(g: np.ndarray, x=self, idx=index) -> None:
            full = np.zeros_like(x.data)
            np.add.at(full, idx, g)
            x._accumulate(full)

        return Tensor(
            np.array(out_data), self.requires_grad, (self,),
            backward if self.requires_grad else None, "getitem",
        )

    # ------------------------------------------------------------------
    # shape ops

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _unary(
            self, self.data.reshape(shape), "reshape",
            lambda g: g.reshape(self.data.shape),
        )

    def flatten2d(self) -> "Tensor":
        """Collapse all axes but the first (batch stays)."""
        return self.reshape(self.data.shape[0], -1)

    # ------------------------------------------------------------------
    # reductions and elementwise functions

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g: np.ndarray, x=self) -> None:
            if axis is None:
                x._accumulate(np.broadcast_to(g, x.data.shape).copy())
                return
            if not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, tuple(a % x.data.ndim for a in axes))
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())

        return Tensor(
            np.asarray(out_data), self.requires_grad, (self,),
            backward if self.requires_grad else None, "sum",
        )

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return _unary(self, self.data * mask, "relu", lambda g: g * mask)

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        return _unary(self, out_data, "exp", lambda g: g * out_data)

    def log(self) -> "Tensor":
        return _unary(self, np.log(self.data), "log", lambda g: g / self.data)

    def abs(self) -> "Tensor":
        sign = np.where(self.data >= 0, 1.0, -1.0)
        return _unary(self, np.abs(self.data), "abs", lambda g: g * sign)


def _unary(x: Tensor, out_data: np.ndarray, op: str,
           dfn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    def backward(g: np.ndarray) -> None:
        x._accumulate(dfn(g))

    return Tensor(out_data, x.requires_grad, (x,),
                  backward if x.requires_grad else None, op)


def _binary(a: Tensor, b: Tensor, out_data: np.ndarray, op: str,
            dfa: Callable[[np.ndarray], np.ndarray],
            dfb: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    requires = a.requires_grad or b.requires_grad

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(dfa(g), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(dfb(g), b.data.shape))

    return Tensor(out_data, requires, (a, b), backward if requires else None, op)


def _scalar_error(t: Tensor):
    raise ValueError(f"expected a scalar tensor, got shape {t.shape}")


# ----------------------------------------------------------------------
# free functions


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (g - inner))

    return Tensor(out_data, x.requires_grad, (x,),
                  backward if x.requires_grad else None, "softmax")


def grad_map(loss: Tensor, leaves: Sequence[Tensor]) -> dict[int, np.ndarray]:
    """Run backward on `loss` and return {id(leaf): gradient}.

    Leaves not reachable from the loss get an explicit zero gradient of
    their own shape.
    """
    loss.backward()
    out = {}
    for leaf in leaves:
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        out[id(leaf)] = g
    return out


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
