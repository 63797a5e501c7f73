"""Dense float64 tensors with a reverse-mode tape.

A :class:`Tensor` wraps a numpy array (always float64) and remembers the op
that produced it. Calling :meth:`Tensor.backward` on a scalar walks the graph
in reverse topological order, visiting each node once, and accumulates
``.grad`` on every tensor that requires it. Only first-order derivatives are
supported.

:func:`grad_check` is the independent oracle: central differences over every
entry of every parameter.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, EvaluationError, InsufficientDataError

DTYPE = np.float64


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = ""):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = op

    # -- construction helpers -------------------------------------------------
    @classmethod
    def param(cls, data) -> "Tensor":
        return cls(np.array(data, dtype=DTYPE), requires_grad=True)

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=DTYPE))

    def _child(self, data, parents, op, backward) -> "Tensor":
        req = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=req, _parents=parents if req else (), op=op)
        if req:
            out._backward = backward
        return out

    # -- introspection --------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # -- elementwise arithmetic ----------------------------------------------
    def __add__(self, other):
        other = self._wrap(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return self._child(a.data + b.data, (a, b), "add", backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._wrap(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return self._child(a.data - b.data, (a, b), "sub", backward)

    def __rsub__(self, other):
        return self._wrap(other) - self

    def __mul__(self, other):
        other = self._wrap(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return self._child(a.data * b.data, (a, b), "mul", backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._wrap(other)
        a, b = self, other

        def backward(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return self._child(a.data / b.data, (a, b), "div", backward)

    def __rtruediv__(self, other):
        return self._wrap(other) / self

    def __neg__(self):
        a = self
        return self._child(-a.data, (a,), "neg", lambda g: (-g,))

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self
        p = float(exponent)

        def backward(g):
            return (g * p * a.data ** (p - 1.0),)

        return self._child(a.data ** p, (a,), "pow", backward)

    # -- linear algebra -------------------------------------------------------
    def __matmul__(self, other):
        return matmul(self, other)

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        a = self
        return self._child(np.transpose(a.data, axes), (a,), "transpose",
                           lambda g: (np.transpose(g, inv),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def swap_last(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(tuple(axes))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return self._child(a.data.reshape(shape), (a,), "reshape",
                           lambda g: (g.reshape(a.shape),))

    # -- reductions -----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            gk = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gk, a.shape).copy(),)

        return self._child(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- pointwise nonlinearities --------------------------------------------
    def exp(self) -> "Tensor":
        a = self
        out = np.exp(a.data)
        return self._child(out, (a,), "exp", lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self
        return self._child(np.log(a.data), (a,), "log", lambda g: (g / a.data,))

    def sqrt(self) -> "Tensor":
        a = self
        out = np.sqrt(a.data)
        return self._child(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))

    def sigmoid(self) -> "Tensor":
        a = self
        out = _sigmoid(a.data)
        return self._child(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))

    def silu(self) -> "Tensor":
        a = self
        s = _sigmoid(a.data)
        out = a.data * s
        return self._child(out, (a,), "silu", lambda g: (g * (s + a.data * s * (1.0 - s)),))

    def relu(self) -> "Tensor":
        a = self
        pos = a.data > 0
        return self._child(np.where(pos, a.data, 0.0), (a,), "relu", lambda g: (g * pos,))

    def tanh(self) -> "Tensor":
        a = self
        out = np.tanh(a.data)
        return self._child(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))

    def softmax(self, axis: int = -1) -> "Tensor":
        a = self
        out = _softmax(a.data, axis)

        def backward(g):
            return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

        return self._child(out, (a,), "softmax", backward)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - lse
        sm = np.exp(out)

        def backward(g):
            return (g - sm * g.sum(axis=axis, keepdims=True),)

        return self._child(out, (a,), "log_softmax", backward)

    # -- indexing -------------------------------------------------------------
    def __getitem__(self, index) -> "Tensor":
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            return (full,)

        return self._child(a.data[index], (a,), "getitem", backward)

    def take_rows(self, rows: np.ndarray) -> "Tensor":
        """Gather rows along axis 0 (rows need not be unique)."""
        a = self
        rows = np.asarray(rows, dtype=np.intp)

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, rows, g)
            return (full,)

        return self._child(a.data[rows], (a,), "take_rows", backward)

    def scatter_rows(self, rows: np.ndarray, n: int) -> "Tensor":
        """Place row ``j`` of self at row ``rows[j]`` of an ``n``-row zero tensor.

        ``rows`` must be unique.
        """
        a = self
        rows = np.asarray(rows, dtype=np.intp)
        out = np.zeros((n,) + a.shape[1:], dtype=DTYPE)
        out[rows] = a.data
        return self._child(out, (a,), "scatter_rows", lambda g: (g[rows],))

    # -- autodiff driver -----------------------------------------------------
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if not node._parents:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# -- functional API -----------------------------------------------------------

def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def matmul(a, b) -> Tensor:
    a = Tensor._wrap(a)
    b = Tensor._wrap(b)
    if a.ndim < 1 or b.ndim < 1:
        raise DimensionError(f"matmul needs rank >= 1 operands, got {a.shape} and {b.shape}")
    inner_a = a.shape[-1]
    inner_b = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if inner_a != inner_b:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
            return ga, gb
        if ad.ndim == 1:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.multiply.outer(ad, g)
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if bd.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *bd.shape).sum(axis=0)
        if ad.ndim == 2 and ga.ndim > 2:
            ga = ga.reshape(-1, *ad.shape).sum(axis=0)
        return ga, gb

    return a._child(out, (a, b), "matmul", backward)


def softmax_rows(x) -> Tensor:
    """Row-wise softmax with max subtraction."""
    return Tensor._wrap(x).softmax(axis=-1)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [Tensor._wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    req = any(t.requires_grad for t in ts)
    res = Tensor(out, requires_grad=req, _parents=tuple(ts) if req else (), op="concat")
    if req:
        res._backward = lambda g: tuple(np.split(g, splits, axis=axis))
    return res


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [Tensor._wrap(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    req = any(t.requires_grad for t in ts)
    res = Tensor(out, requires_grad=req, _parents=tuple(ts) if req else (), op="stack")
    if req:
        res._backward = lambda g: tuple(np.moveaxis(g, axis, 0))
    return res


def layer_norm(x: Tensor, axis=-1, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=axis, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    return centered / (var + eps).sqrt()


def linear_slope(y) -> float:
    """Least-squares slope of ``y`` against ``0..n-1``."""
    y = np.asarray(_as_array(y), dtype=DTYPE).reshape(-1)
    n = y.size
    if n < 2:
        raise InsufficientDataError(f"slope needs at least 2 points, got {n}")
    t = np.arange(n, dtype=DTYPE)
    tc = t - t.mean()
    return float(np.dot(tc, y - y.mean()) / np.dot(tc, tc))


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` is re-evaluated with each parameter entry perturbed in place; the
    error for one entry is ``|auto - fd| / max(1, |fd|)``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise EvaluationError("objective is not finite at the base point")
    loss.backward()
    worst = 0.0
    for p in params:
        auto = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        auto_flat = auto.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise EvaluationError(f"objective not finite near parameter entry {i}")
            fd = (fp - fm) / (2.0 * h)
            err = abs(auto_flat[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


class Module:
    """Minimal parameter container: walks attributes for trainable tensors."""

    training = False

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise DimensionError(f"state is missing parameters: {sorted(missing)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()


class Linear(Module):
    """y = x W^T + b with W of shape (out, in)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        scale = 1.0 / math.sqrt(in_dim)
        w = np.zeros((out_dim, in_dim)) if zero else rng.uniform(-scale, scale, (out_dim, in_dim))
        self.weight = Tensor.param(w)
        self.bias = Tensor.param(np.zeros(out_dim) if zero else rng.uniform(-scale, scale, out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight.swap_last())
        return y + self.bias if self.bias is not None else y
