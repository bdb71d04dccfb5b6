"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Tensors wrap ndarray values; ops record a backward closure and parent links,
and backward() walks the graph once in reverse topological order. Everything
is 64-bit; gradient correctness is gated by finite differences in the test
suite before any training result is trusted.
"""

import numpy as np

from .errors import ContractError

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def canonical_moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column (mean, biased variance) over axis 0, accumulated in sorted
    order so the values are exactly invariant under row permutations."""
    r = x.shape[0]
    z = np.ascontiguousarray(x.T)
    z.sort(axis=1)
    mean = z.sum(axis=1) / r
    centered = z - mean[:, None]
    var = (centered * centered).sum(axis=1) / r
    return mean, var


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(p for p in parents if p.requires_grad)
            out._backward = backward
        return out

    @staticmethod
    def _lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other)
        def backward(g, a=self, b=other):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))
        return Tensor._op(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g, a=self):
            a._accumulate(-g)
        return Tensor._op(-self.data, (self,), backward)

    def __sub__(self, other):
        other = Tensor._lift(other)
        def backward(g, a=self, b=other):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.data.shape))
        return Tensor._op(self.data - other.data, (self, other), backward)

    def __rsub__(self, other):
        return Tensor._lift(other) - self

    def __mul__(self, other):
        other = Tensor._lift(other)
        def backward(g, a=self, b=other):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))
        return Tensor._op(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        def backward(g, a=self, b=other):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        return Tensor._op(self.data / other.data, (self, other), backward)

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ContractError("only scalar exponents are supported")
        def backward(g, a=self, e=exponent):
            a._accumulate(g * e * a.data ** (e - 1))
        return Tensor._op(self.data**exponent, (self,), backward)

    def matmul(self, other):
        other = Tensor._lift(other)
        def backward(g, a=self, b=other):
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                a._accumulate(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b._accumulate(_unbroadcast(gb, b.data.shape))
        return Tensor._op(self.data @ other.data, (self, other), backward)

    __matmul__ = matmul

    # -- elementwise nonlinearities -------------------------------------------

    def relu(self):
        def backward(g, a=self, mask=self.data > 0):
            a._accumulate(g * mask)
        return Tensor._op(np.maximum(self.data, 0.0), (self,), backward)

    def exp(self):
        out_data = np.exp(self.data)
        def backward(g, a=self, d=out_data):
            a._accumulate(g * d)
        return Tensor._op(out_data, (self,), backward)

    def log(self):
        def backward(g, a=self):
            a._accumulate(g / a.data)
        return Tensor._op(np.log(self.data), (self,), backward)

    def sqrt(self):
        out_data = np.sqrt(self.data)
        def backward(g, a=self, d=out_data):
            a._accumulate(g / (2.0 * d))
        return Tensor._op(out_data, (self,), backward)

    # -- shape ops -------------------------------------------------------------

    def reshape(self, shape):
        def backward(g, a=self):
            a._accumulate(g.reshape(a.data.shape))
        return Tensor._op(self.data.reshape(shape), (self,), backward)

    def swapaxes(self, a: int, b: int):
        def backward(g, t=self):
            t._accumulate(np.swapaxes(g, a, b))
        return Tensor._op(np.swapaxes(self.data, a, b), (self,), backward)

    # -- reductions --------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        def backward(g, a=self):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape))
        return Tensor._op(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def sorted_moments(self):
        """Row-permutation-invariant batch statistics over axis 0: returns a
        (2, C) tensor stacking [mean; biased variance] per column."""
        mean, var = canonical_moments(self.data)
        data = np.stack([mean, var])
        count = self.data.shape[0]
        def backward(g, a=self, m=mean):
            # d mean / dx = 1/R; d var / dx = 2 (x - mean) / R
            a._accumulate((g[0] + g[1] * 2.0 * (a.data - m)) / count)
        return Tensor._op(data, (self,), backward)

    def __getitem__(self, key):
        def backward(g, a=self):
            full = np.zeros_like(a.data)
            full[key] = g
            a._accumulate(full)
        return Tensor._op(self.data[key], (self,), backward)

    def max(self, axis: int, keepdims: bool = False):
        def backward(g, a=self):
            if not keepdims:
                g = np.expand_dims(g, axis)
            idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
            full = np.zeros_like(a.data)
            np.put_along_axis(full, idx, g, axis=axis)
            a._accumulate(full)
        return Tensor._op(self.data.max(axis=axis, keepdims=keepdims), (self,), backward)

    # -- backward pass ------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ContractError("backward() needs a scalar loss")
        order: list[Tensor] = []
        state: dict[int, int] = {}  # 0 in progress, 1 done
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                state[id(node)] = 1
                order.append(node)
                continue
            mark = state.get(id(node))
            if mark == 1:
                continue
            if mark == 0:
                raise ContractError("cycle detected in autodiff graph")
            state[id(node)] = 0
            stack.append((node, True))
            for parent in node._parents:
                if state.get(id(parent)) != 1:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def backward(g, parts=tensors):
        for part, piece in zip(parts, np.split(g, splits, axis=axis)):
            if part.requires_grad:
                part._accumulate(piece)
    return Tensor._op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Rows scaled to unit Euclidean norm."""
    norm = (x * x).sum(axis=axis, keepdims=True).sqrt()
    return x / norm


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stabilized log-sum-exp; the shift is a constant so gradients are exact."""
    shift = np.max(x.data, axis=axis, keepdims=True)
    out = (x - Tensor(shift)).exp().sum(axis=axis, keepdims=keepdims).log()
    return out + Tensor(shift if keepdims else np.squeeze(shift, axis=axis))
