"""Dense float64 tensors with tape-based reverse-mode differentiation."""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from battrul.tensor import kernels

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An n-d float64 array that records the ops producing it.

    ``grad`` is populated by :meth:`backward` for every tensor with
    ``requires_grad`` reachable from the loss. Leaves created with
    ``requires_grad=True`` start with a zero gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # -- reverse mode --------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1 or self.data.ndim != 0:
            raise ShapeError("backward", self.shape, detail="loss must be a 0-d scalar")
        if not self.requires_grad:
            raise RuntimeError("backward: loss is not connected to any tensor requiring grad")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                node.grad = node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar ------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = tuple(parents)
                out._backward = backward
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op: str, a: Tensor, b: Tensor, ufunc) -> np.ndarray:
    try:
        return ufunc(a.data, b.data)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary("add", a, b, np.add)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary("sub", a, b, np.subtract)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary("mul", a, b, np.multiply)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary("div", a, b, np.divide)

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), backward)


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _result(a.data * c, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), backward)


# ---------------------------------------------------------------------------
# elementwise unary


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = kernels.sigmoid(a.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _result(out, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        # subgradient 0 at the origin keeps sqrt(0) losses finite
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _result(out, (a,), backward)


def abs_(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * np.sign(a.data),)

    return _result(np.abs(a.data), (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _result(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), backward)


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (2.0 * g * a.data,)

    return _result(a.data * a.data, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * inside,)

    return _result(np.clip(a.data, lo, hi), (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=np.float64), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    if n == 0:
        raise ShapeError("mean", a.shape, detail="reduction over an empty axis")
    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims), dtype=np.float64)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# structural


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), backward)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    try:
        out = a.data.transpose(axes)
    except ValueError:
        raise ShapeError("transpose", a.shape, detail=f"bad axes {axes}") from None

    def backward(g):
        return (g.transpose(np.argsort([ax % a.ndim for ax in axes])),)

    return _result(out, (a,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", detail="no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, ts, backward)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, slice, np.integer)) for p in parts)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError:
        raise ShapeError("slice", a.shape, detail=f"index {index!r}") from None
    out = np.array(out, dtype=np.float64, copy=True)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# sequence ops


def conv1d_depthwise(x, kernels_, padding: str = "same") -> Tensor:
    """Per-channel 1-d convolution along the last (time) axis.

    ``x`` is ``(B, C, T)``. ``kernels_`` is ``(C, K)`` for a plain depthwise
    conv, or ``(C, M, K)`` to lift every channel independently to ``M``
    outputs; the result is then ``(B, C, M, T)``. Zero "same" padding, odd K.
    This is cross-correlation, as in every deep-learning framework.
    """
    x, w = as_tensor(x), as_tensor(kernels_)
    if padding != "same":
        raise ValueError(f"conv1d_depthwise: unsupported padding {padding!r}")
    squeeze = w.ndim == 2
    w3 = w.data[:, None, :] if squeeze else w.data
    if x.ndim != 3 or w3.ndim != 3 or w3.shape[0] != x.shape[1] or w3.shape[2] % 2 == 0:
        raise ShapeError("conv1d_depthwise", x.shape, w.shape)
    K = w3.shape[2]
    T = x.shape[2]
    pad = K // 2
    xp = np.zeros(x.shape[:2] + (T + 2 * pad,))
    xp[:, :, pad:pad + T] = x.data
    # cols[b, c, t, k] = xp[b, c, t + k]
    cols = np.lib.stride_tricks.as_strided(
        xp, x.shape[:2] + (T, K), xp.strides + xp.strides[-1:], writeable=False)
    # (B, C, T, K) @ (C, K, M) -> (B, C, T, M)
    out = np.swapaxes(np.matmul(cols, np.swapaxes(w3, 1, 2)), 2, 3)
    if squeeze:
        out = out[:, :, 0, :]

    def backward(g):
        g4 = g[:, :, None, :] if squeeze else g
        gx = gw = None
        if w.requires_grad:
            # sum_b (C, M, T) @ (C, T, K)
            gw = np.matmul(g4, cols).sum(axis=0)
            if squeeze:
                gw = gw[:, 0, :]
        if x.requires_grad:
            gcols = np.matmul(np.swapaxes(g4, 2, 3), w3)
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, :, k:k + T] += gcols[:, :, :, k]
            gx = gxp[:, :, pad:pad + T]
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, w), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    xc = x.data - x.data.sum(axis=-1, keepdims=True) * (1.0 / d)
    inv = 1.0 / np.sqrt((xc * xc).sum(axis=-1, keepdims=True) * (1.0 / d) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _result(out, (x,), backward)


def lstm(x, w_ih, w_hh, bias) -> Tensor:
    """One LSTM layer over a whole sequence, zero initial state.

    ``x`` is ``(B, T, D)``; weights are ``(D, 4H)``, ``(H, 4H)`` and ``(4H,)``
    with gate blocks ordered input, forget, cell, output. Returns all hidden
    states ``(B, T, H)``. The recurrence runs in :mod:`battrul.tensor.kernels`.
    """
    x, w_ih, w_hh, bias = (as_tensor(t) for t in (x, w_ih, w_hh, bias))
    if x.ndim != 3 or w_ih.ndim != 2 or w_ih.shape[0] != x.shape[2]:
        raise ShapeError("lstm", x.shape, w_ih.shape)
    H4 = w_ih.shape[1]
    H = H4 // 4
    if H4 % 4 or w_hh.shape != (H, H4) or bias.shape != (H4,):
        raise ShapeError("lstm", w_ih.shape, w_hh.shape, bias.shape)
    B, T, D = x.shape
    xp = np.ascontiguousarray(np.matmul(x.data, w_ih.data) + bias.data)
    whh = np.ascontiguousarray(w_hh.data)
    h, c, gates = kernels.lstm_forward(xp, whh)

    def backward(g):
        dz = kernels.lstm_backward(np.ascontiguousarray(g), gates, c, whh)
        dz2 = dz.reshape(B * T, H4)
        gx = gwi = gwh = gb = None
        if x.requires_grad:
            gx = np.matmul(dz, w_ih.data.T)
        if w_ih.requires_grad:
            gwi = x.data.reshape(B * T, D).T @ dz2
        if w_hh.requires_grad:
            h_prev = np.zeros_like(h)
            h_prev[:, 1:] = h[:, :-1]
            gwh = h_prev.reshape(B * T, H).T @ dz2
        if bias.requires_grad:
            gb = dz2.sum(axis=0)
        return gx, gwi, gwh, gb

    return _result(h, (x, w_ih, w_hh, bias), backward)
