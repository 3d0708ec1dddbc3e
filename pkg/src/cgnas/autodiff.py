"""A small float64 tensor engine with reverse-mode automatic differentiation.

Every operation on a :class:`Tensor` that needs gradients records its parents
and a backward closure.  Tensors receive increasing creation ids, so the
recorded graph is a tape: replaying the reachable entries in decreasing id
order is a valid reverse topological order.
"""
from __future__ import annotations

import hashlib
import itertools
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: tuple = (), _backward: Optional[Callable] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error("item")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, power(as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _scalar_error(what):
    raise ValueError(f"{what} requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check(cond: bool, prim: str, msg: str):
    if not cond:
        raise ValueError(f"{prim}: dimension error: {msg}")


def _broadcastable(prim: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        _check(False, prim, f"shapes {a.shape} and {b.shape} do not broadcast")


# ------------------------------------------------------------------ primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, k: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * k, (a,), lambda g: (g * k,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.ndim >= 2 and b.ndim >= 2, "matmul", f"operands must be at least 2-d, got {a.shape} @ {b.shape}")
    _check(a.shape[-1] == b.shape[-2], "matmul", f"inner sizes differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim == 2:
        # batched activations times a weight matrix: one flat GEMM each way
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2
        return _make(out, (a, b), bw)
    return _make(a.data @ b.data, (a, b),
                 lambda g: (_unbroadcast(g @ _swap(b.data), a.shape),
                            _unbroadcast(_swap(a.data) @ g, b.shape)))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    _check(a.ndim >= 2, "transpose", f"need at least 2-d, got {a.shape}")
    return _make(_swap(a.data), (a,), lambda g: (_swap(g),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        _check(False, "reshape", f"cannot reshape {a.shape} to {tuple(shape)}")
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sum(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, (a,), bw)


def mean(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis, keepdims), 1.0 / count)


def mean_rows(a) -> Tensor:
    """Mean over rows (axis -2), keeping a single row."""
    return mean(a, axis=-2, keepdims=True)


def _masked_fill(x: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    return x if mask is None else np.where(mask, x, -np.inf)


def softmax(a, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; masked-out entries get probability 0."""
    a = as_tensor(a)
    z = _masked_fill(a.data, mask)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    tot = e.sum(axis=-1, keepdims=True)
    y = np.divide(e, tot, out=np.zeros_like(e), where=tot > 0)
    return _make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(a, mask: Optional[np.ndarray] = None) -> Tensor:
    """Log-softmax over the last axis restricted to ``mask``; masked entries are 0."""
    a = as_tensor(a)
    z = _masked_fill(a.data, mask)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    tot = e.sum(axis=-1, keepdims=True)
    lse = zmax + np.log(np.where(tot > 0, tot, 1.0))
    y = a.data - lse
    p = np.divide(e, tot, out=np.zeros_like(e), where=tot > 0)
    if mask is not None:
        y = np.where(mask, y, 0.0)

    def bw(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        gx = g - p * g.sum(axis=-1, keepdims=True)
        return (gx if mask is None else np.where(mask, gx, 0.0),)
    return _make(y, (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    _check(len(ts) > 0, "concat", "nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        _check(False, "concat", str(exc))
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = a.data / norm
    return _make(y, (a,), lambda g: ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,))


def _selection(index: np.ndarray, n: int) -> sp.csr_matrix:
    m = len(index)
    return sp.csr_matrix((np.ones(m), (np.arange(m), index)), shape=(m, n))


def gather_rows(a, index) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    _check(a.ndim == 2, "gather_rows", f"expects a 2-d tensor, got {a.shape}")
    _check(index.size == 0 or (index.min() >= 0 and index.max() < a.shape[0]),
           "gather_rows", f"index out of range for {a.shape[0]} rows")
    sel = _selection(index, a.shape[0])
    return _make(a.data[index], (a,), lambda g: (np.asarray(sel.T @ g),))


def scatter_mean_rows(values, index, n: int) -> Tensor:
    """Row ``k`` of the result is the mean of the rows of ``values`` with ``index == k``."""
    values = as_tensor(values)
    index = np.asarray(index, dtype=np.int64)
    _check(values.ndim == 2, "scatter_mean_rows", f"expects a 2-d tensor, got {values.shape}")
    _check(len(index) == values.shape[0], "scatter_mean_rows",
           f"{len(index)} indices for {values.shape[0]} rows")
    _check(index.size == 0 or (index.min() >= 0 and index.max() < n), "scatter_mean_rows",
           f"index out of range for {n} outputs")
    counts = np.bincount(index, minlength=n).astype(float)
    w = 1.0 / counts[index]
    agg = sp.csr_matrix((w, (index, np.arange(len(index)))), shape=(n, len(index)))
    return _make(np.asarray(agg @ values.data), (values,), lambda g: (np.asarray(agg.T @ g),))


# -------------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape: list[Tensor] = []
    seen = {loss._id}
    stack = [loss]
    while stack:
        t = stack.pop()
        tape.append(t)
        for p in t._parents:
            if p.requires_grad and p._id not in seen:
                seen.add(p._id)
                stack.append(p)
    tape.sort(key=lambda t: t._id, reverse=True)
    grads = {loss._id: np.ones_like(loss.data)}
    for t in tape:
        g = grads.pop(t._id, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if not p.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise FloatingPointError("non-finite gradient during backward")
            grads[p._id] = grads[p._id] + pg if p._id in grads else pg


# -------------------------------------------------------------- parameter store

class ParamStore:
    """Named trainable tensors with Adam state."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def num_values(self, prefix: str = "") -> int:
        return int(np.sum([self.params[n].data.size for n in self.names(prefix)]))

    def set_trainable(self, trainable: bool, prefix: str = "") -> None:
        for n in self.names(prefix):
            self.params[n].requires_grad = trainable

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8, names: Optional[Iterable[str]] = None) -> None:
        self.step_count += 1
        t = self.step_count
        for name in (names if names is not None else self.params):
            p = self.params[name]
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self._m.get(name, np.zeros_like(p.data))
            v = self._v.get(name, np.zeros_like(p.data))
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)

    def reset_optimizer(self) -> None:
        self._m.clear()
        self._v.clear()
        self.step_count = 0

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for name, t in self.params.items():
            new.add(name, t.data.copy()).requires_grad = t.requires_grad
        return new

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for n, t in self.params.items():
            h.update(n.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()[:16]

    def save(self, path: str | Path, config_digest: str) -> None:
        arrays = {f"param:{n}": t.data for n, t in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __config_digest__=np.array(config_digest),
                     __order__=np.array(list(self.params)), **arrays)

    @classmethod
    def load(cls, path: str | Path, config_digest: Optional[str] = None) -> "ParamStore":
        with np.load(path) as data:
            found = str(data["__config_digest__"])
            if config_digest is not None and found != config_digest:
                raise ValueError(f"checkpoint {path} was written for config {found}, "
                                 f"expected {config_digest}")
            store = cls()
            for name in data["__order__"]:
                store.add(str(name), data[f"param:{name}"])
        return store


def numerical_grad(fn: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn`` with respect to ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)
