"""A small reverse-mode differentiation engine over numpy arrays.

Only the handful of ops a dense/conv classifier needs are provided.  Every op
returns a new :class:`Tensor` that remembers its parents and a closure that
pushes the output gradient back to them.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation, StateError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise StateError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ContractViolation("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()

        def visit(t):
            # iterative DFS; deep conv stacks would otherwise hit the recursion limit
            stack = [(t, False)]
            while stack:
                node, done = stack.pop()
                if done:
                    order.append(node)
                    continue
                if id(node) in seen or not node.requires_grad:
                    continue
                seen.add(id(node))
                stack.append((node, True))
                stack.extend((p, False) for p in node._parents)

        visit(self)
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g.copy() if t.grad is None else t.grad + g


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape (N, in) and ``w`` of shape (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ContractViolation(f"dense: input width {x.shape[-1]} != weight width {w.shape[1]}")

    def back(g):
        _accumulate(x, g @ w.data)
        _accumulate(w, g.T @ x.data)
        _accumulate(b, g.sum(axis=0))

    return Tensor(x.data @ w.data.T + b.data, _parents=(x, w, b), _backward=back)


def conv_output_size(h: int, k: int, stride: int, padding: int) -> int:
    return (h + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """(N, C, H, W) -> (N, C*kh*kw, Ho*Wo), column order matching ``w.reshape(O, -1)``."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    n, c, h, wd = x.shape
    o, wc, kh, kw = w.shape
    if c != wc:
        raise ContractViolation(f"conv2d: {c} input channels, weight expects {wc}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    cols = im2col(x.data, kh, kw, stride, padding)
    w2 = w.data.reshape(o, -1)
    out = w2 @ cols + b.data[None, :, None]

    def back(g):
        g = g.reshape(n, o, ho * wo)
        _accumulate(w, np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape))
        _accumulate(b, g.sum(axis=(0, 2)))
        if x.requires_grad:
            _accumulate(x, col2im(w2.T @ g, x.shape, kh, kw, stride, padding))

    return Tensor(out.reshape(n, o, ho, wo), _parents=(x, w, b), _backward=back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, 0.0), _parents=(x,),
                  _backward=lambda g: _accumulate(x, g * mask))


def _pool_windows(a: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = a.shape
    if h % k or w % k:
        raise ContractViolation(f"pool size {k} must divide spatial dims {h}x{w}")
    return a.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)


def _unpool(g: np.ndarray, k: int) -> np.ndarray:
    n, c, ho, wo, _ = g.shape
    return g.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)


def maxpool2d(x: Tensor, k: int) -> Tensor:
    win = _pool_windows(x.data, k)
    arg = win.argmax(axis=-1)
    onehot = np.arange(k * k) == arg[..., None]

    def back(g):
        _accumulate(x, _unpool(onehot * g[..., None], k))

    return Tensor(win.max(axis=-1), _parents=(x,), _backward=back)


def avgpool2d(x: Tensor, k: int) -> Tensor:
    win = _pool_windows(x.data, k)

    def back(g):
        _accumulate(x, _unpool(np.repeat(g[..., None] / (k * k), k * k, axis=-1), k))

    return Tensor(win.mean(axis=-1), _parents=(x,), _backward=back)


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor(x.data.reshape(shape), _parents=(x,),
                  _backward=lambda g: _accumulate(x, g.reshape(x.shape)))


def straight_through(x: Tensor, value: np.ndarray, mask: np.ndarray) -> Tensor:
    """Forward ``value``; backward passes the gradient where ``mask`` is True, else 0."""
    return Tensor(value, _parents=(x,), _backward=lambda g: _accumulate(x, g * mask))


def scale(x: Tensor, c: float) -> Tensor:
    return Tensor(x.data * c, _parents=(x,), _backward=lambda g: _accumulate(x, g * c))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        _accumulate(logits, p * (g / n))

    return Tensor(loss, _parents=(logits,), _backward=back)
