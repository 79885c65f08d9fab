"""Reverse-mode autodiff on numpy arrays, covering exactly the operations
the refining models need (no general graph ambitions).

Tensors carry float64 data during training so finite-difference gradient
checks are meaningful; inference may run the same graph in float32 under
``no_grad()``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data, dtype=np.float64)
        self.grad += grad

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Backpropagate from this tensor (scalar unless `grad` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar")
            grad = np.ones_like(self.data, dtype=np.float64)
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen or not t.requires_grad:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for t in reversed(topo):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._backward is None:
                t._accumulate(g)
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        return Tensor._result(
            self.data + other.data, (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        return Tensor._result(
            self.data - other.data, (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)))

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        return Tensor._result(
            self.data * other.data, (self, other),
            lambda g: (_unbroadcast(g * other.data, self.shape),
                       _unbroadcast(g * self.data, other.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        return Tensor._result(
            self.data / other.data, (self, other),
            lambda g: (_unbroadcast(g / other.data, self.shape),
                       _unbroadcast(-g * self.data / other.data ** 2, other.shape)))

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        return Tensor._result(
            self.data ** exponent, (self,),
            lambda g: (g * exponent * self.data ** (exponent - 1),))

    def __matmul__(self, other):
        other = _as_tensor(other)

        def backward(g):
            a, b = self.data, other.data
            if b.ndim == 1:
                ga = np.outer(g, b) if a.ndim > 1 else g * b
                gb = a.T @ g if a.ndim > 1 else g * a
            elif a.ndim == 1:
                ga = g @ np.swapaxes(b, -1, -2)
                gb = np.outer(a, g)
            else:
                ga = g @ np.swapaxes(b, -1, -2)
                gb = np.swapaxes(a, -1, -2) @ g
            return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

        return Tensor._result(self.data @ other.data, (self, other), backward)

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._result(self.data.reshape(shape), (self,),
                              lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._result(self.data.transpose(axes), (self,),
                              lambda g: (g.transpose(inv),))

    def broadcast_to(self, shape):
        old = self.shape
        return Tensor._result(np.broadcast_to(self.data, shape), (self,),
                              lambda g: (_unbroadcast(g, old),))

    def narrow(self, axis: int, start: int, length: int):
        """Contiguous slice along one axis."""
        index = [slice(None)] * self.ndim
        index[axis] = slice(start, start + length)
        index = tuple(index)
        shape = self.shape

        def backward(g):
            out = np.zeros(shape, dtype=np.float64)
            out[index] = g
            return (out,)

        return Tensor._result(self.data[index], (self,), backward)

    # -- reductions ----------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def backward(g):
            if axis is None:
                return (np.full(shape, g, dtype=np.float64),)
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g_exp, shape).copy(),)

        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims),
                              (self,), backward)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int, keepdims: bool = False):
        """Max along one axis; gradient routes to the first argmax."""
        idx = np.argmax(self.data, axis=axis)
        out = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis=axis)
        shape = self.shape

        def backward(g):
            g_exp = g if keepdims else np.expand_dims(g, axis)
            full = np.zeros(shape, dtype=np.float64)
            np.put_along_axis(full, np.expand_dims(idx, axis), g_exp, axis=axis)
            return (full,)

        data = out if keepdims else np.squeeze(out, axis=axis)
        return Tensor._result(data, (self,), backward)

    # -- elementwise nonlinearities --------------------------------------------------

    def relu(self):
        mask = self.data > 0
        return Tensor._result(self.data * mask, (self,), lambda g: (g * mask,))

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor._result(out_data, (self,), lambda g: (g * out_data,))

    def log(self):
        return Tensor._result(np.log(self.data), (self,),
                              lambda g: (g / self.data,))

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return Tensor._result(out_data, (self,), lambda g: (g / (2.0 * out_data),))

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor._result(out_data, (self,),
                              lambda g: (g * out_data * (1.0 - out_data),))

    def abs(self):
        sign = np.sign(self.data)
        return Tensor._result(np.abs(self.data), (self,), lambda g: (g * sign,))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, rng: "np.random.Generator | None" = None, scale=None) -> Tensor:
    """A trainable float64 tensor. With `rng`, `data` is a shape and entries
    are drawn N(0, scale^2); scale defaults to sqrt(2 / fan_in)."""
    if rng is not None:
        shape = tuple(data)
        fan_in = shape[0] if shape else 1
        scale = math.sqrt(2.0 / fan_in) if scale is None else scale
        data = rng.normal(0.0, scale, shape)
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for t, start, size in zip(tensors, offsets, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, start + size)
            grads.append(g[tuple(index)])
        return tuple(grads)

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis),
                          tensors, backward)


def masked_softmax(scores: Tensor, mask: "np.ndarray | None" = None,
                   axis: int = -1) -> Tensor:
    """Softmax along `axis`; positions where `mask` is False get weight 0.

    A slice whose mask excludes every position yields an all-zero row (and
    zero gradient), so attention there contributes nothing and the residual
    path passes through.
    """
    x = scores.data
    if mask is not None:
        allowed = np.broadcast_to(mask, x.shape)
        x = np.where(allowed, x, -np.inf)
    x_max = np.max(x, axis=axis, keepdims=True)
    x_max = np.where(np.isfinite(x_max), x_max, 0.0)
    e = np.exp(x - x_max)
    if mask is not None:
        e = np.where(allowed, e, 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    out_data = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - inner),)

    return Tensor._result(out_data, (scores,), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               row_weights: "np.ndarray | None", eps: float):
    """Fused batch normalization over all leading axes of (..., C).

    `row_weights`, when given, are per-row weights summing to 1 (zero for
    padded rows), so statistics exclude padding. Returns (out, mean, var)
    with mean/var as plain arrays for running-stat updates. Single fused
    forward/backward pass; the composite-op equivalent would traverse the
    large activations ~10 times.
    """
    shape = x.shape
    c = shape[-1]
    flat = x.data.reshape(-1, c)
    n = flat.shape[0]
    if row_weights is None:
        w = np.full(n, 1.0 / n, dtype=flat.dtype)
    else:
        w = row_weights.reshape(-1).astype(flat.dtype)
        w = w / w.sum()
    mean = w @ flat
    diff = flat - mean
    var = w @ (diff * diff)
    sigma = np.sqrt(var + eps)
    x_hat = diff / sigma
    out_data = (x_hat * gamma.data + beta.data).reshape(shape)

    def backward(g):
        g2 = g.reshape(-1, c)
        g_beta = g2.sum(axis=0)
        g_gamma = (g2 * x_hat).sum(axis=0)
        big_g = g2 * gamma.data
        term = (big_g.sum(axis=0) + x_hat * (big_g * x_hat).sum(axis=0))
        g_x = (big_g - w[:, None] * term) / sigma
        return (g_x.reshape(shape), g_gamma, g_beta)

    out = Tensor._result(out_data, (x, gamma, beta), backward)
    return out, mean.astype(np.float64), var.astype(np.float64)


def logsumexp(logits: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Numerically stable log-sum-exp; the max shift is a constant, which
    leaves the gradient exact."""
    shift = np.max(logits.data, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    shifted = logits - Tensor(shift)
    out = shifted.exp().sum(axis=axis, keepdims=True).log() + Tensor(shift)
    if not keepdims:
        out = out.reshape(tuple(d for i, d in enumerate(out.shape) if i != axis % out.ndim))
    return out


def cross_entropy_with_logits(logits: Tensor, target_index: np.ndarray,
                              axis: int = -1) -> Tensor:
    """Mean cross-entropy of integer targets over the final axis."""
    onehot = np.zeros(logits.shape, dtype=np.float64)
    np.put_along_axis(onehot, np.expand_dims(np.asarray(target_index), axis),
                      1.0, axis=axis)
    log_z = logsumexp(logits, axis=axis, keepdims=True)
    picked = (logits * Tensor(onehot)).sum(axis=axis, keepdims=True)
    losses = log_z - picked
    return losses.sum() * (1.0 / losses.data.size)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits (numerically stable form)."""
    t = _as_tensor(targets)
    losses = logits.relu() - logits * t + ((logits.abs() * -1.0).exp() + 1.0).log()
    return losses.sum() * (1.0 / max(losses.data.size, 1))
