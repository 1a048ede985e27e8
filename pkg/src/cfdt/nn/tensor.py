"""Reverse-mode automatic differentiation over a fixed vocabulary of numpy ops.

Each op computes its forward value eagerly and, when any input requires a
gradient, records a closure that maps the output gradient onto its inputs.
:func:`backward` walks the recorded graph in reverse topological order.
"""
from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _result(data, parents, backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded ``t`` that requires it."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order, seen = [], set()
    stack = [(loss, False)]
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
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---- elementwise / structural ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _result(out, (a, b), _bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e

    def _bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _result(out, (a, b), _bw)


def sum_all(x: Tensor) -> Tensor:
    def _bw(g):
        _accumulate(x, np.broadcast_to(g, x.shape))
    return _result(np.asarray(x.data.sum()), (x,), _bw)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {x.shape} -> {shape}") from e

    def _bw(g):
        _accumulate(x, g.reshape(x.shape))
    return _result(out, (x,), _bw)


def stack(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"stack: {[t.shape for t in tensors]}") from e

    def _bw(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))
    return _result(out, tensors, _bw)


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing; no repeated elements."""
    out = x.data[key]

    def _bw(g):
        full = np.zeros_like(x.data)
        full[key] = g
        _accumulate(x, full)
    return _result(out, (x,), _bw)


# ---- dense algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 1 or a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                _accumulate(b, a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
    return _result(out, (a, b), _bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def _bw(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(gamma, (g * xhat).sum(axis=lead))
        _accumulate(beta, g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gamma.data
            n = x.shape[-1]
            dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
            _accumulate(x, dx)
    return _result(out, (x, gamma, beta), _bw)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    p = _softmax(x.data)

    def _bw(g):
        _accumulate(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))
    return _result(p, (x,), _bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    x2 = x.data * x.data
    u = _GELU_C * (x.data + 0.044715 * x2 * x.data)
    th = np.tanh(u)
    out = 0.5 * x.data * (1.0 + th)

    def _bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accumulate(x, g * (0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th * th) * du))
    return _result(out, (x,), _bw)


def embedding(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding index out of range for table of {table.shape[0]} rows")
    out = table.data[idx]

    def _bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        _accumulate(table, full)
    return _result(out, (table,), _bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def _bw(g):
        _accumulate(x, g * keep)
    return _result(x.data * keep, (x,), _bw)


# ---- attention and loss ---------------------------------------------------------

def causal_masked_attention(q: Tensor, k: Tensor, v: Tensor, key_mask=None,
                            n_heads: int = 1) -> Tensor:
    """Multi-head scaled dot-product attention over ``(B, T, E)`` inputs.

    Position ``i`` attends to ``j <= i`` where ``key_mask[b, j]`` is true. A
    position always attends to itself, so fully padded prefixes stay finite;
    their outputs are meaningless and must be masked downstream.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape != k.shape or q.shape != v.shape or q.data.ndim != 3:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    B, T, E = q.shape
    if E % n_heads:
        raise ShapeError(f"attention: embed dim {E} not divisible by {n_heads} heads")
    d = E // n_heads
    scale = 1.0 / math.sqrt(d)

    def split(a):
        return a.reshape(B, T, n_heads, d).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    allowed = np.tril(np.ones((T, T), dtype=bool))[None, None]
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (B, T):
            raise ShapeError(f"attention: key_mask {key_mask.shape} != {(B, T)}")
        allowed = allowed & key_mask[:, None, None, :]
        allowed = allowed | np.eye(T, dtype=bool)[None, None]
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    scores = np.where(allowed, scores, -np.inf)
    p = _softmax(scores)
    out = (p @ vh).transpose(0, 2, 1, 3).reshape(B, T, E)

    def _bw(g):
        gh = split(g)
        dp = gh @ vh.transpose(0, 1, 3, 2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        merge = lambda a: a.transpose(0, 2, 1, 3).reshape(B, T, E)
        _accumulate(q, merge(ds @ kh))
        _accumulate(k, merge(ds.transpose(0, 1, 3, 2) @ qh))
        _accumulate(v, merge(p.transpose(0, 1, 3, 2) @ gh))
    return _result(out, (q, k, v), _bw)


def cross_entropy(logits: Tensor, targets, element_mask=None) -> Tensor:
    """Mean negative log-likelihood over unmasked elements; logits ``(..., C)``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    C = logits.shape[-1]
    z = logits.data.reshape(-1, C)
    t = targets.reshape(-1)
    w = (np.ones(len(t), dtype=z.dtype) if element_mask is None
         else np.asarray(element_mask, dtype=z.dtype).reshape(-1))
    if w.shape != t.shape:
        raise ShapeError(f"cross_entropy: mask {np.shape(element_mask)} vs targets {targets.shape}")
    count = max(float(w.sum()), 1.0)
    zs = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(zs).sum(axis=1))
    nll = logsum - zs[np.arange(len(t)), t]
    loss = np.asarray((w * nll).sum() / count, dtype=logits.dtype)

    def _bw(g):
        p = np.exp(zs - logsum[:, None])
        p[np.arange(len(t)), t] -= 1.0
        grad = p * (w / count)[:, None] * g
        _accumulate(logits, grad.reshape(logits.shape).astype(logits.dtype, copy=False))
    return _result(loss, (logits,), _bw)
