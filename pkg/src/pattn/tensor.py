"""Dense tensors with reverse-mode automatic differentiation.

Everything is backed by numpy arrays. Each forward op records a backward
closure and parent links on its output tensor; ``backward()`` runs a
topological sweep from a scalar loss. The graph lives only in those parent
links, so it is discarded together with the intermediates of one forward pass.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


class Tensor:
    """A dense array with an optional gradient slot.

    ``requires_grad`` leaves accumulate into ``.grad`` across backward calls;
    intermediates use ``.grad`` as scratch during a sweep and are cleared
    afterwards.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def _add_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def _out(self, data, parents, backward):
        out = Tensor(data)
        out._parents = parents
        out._backward = backward
        return out

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self, other

        def bw(g):
            a._add_grad(_unbroadcast(g, a.shape))
            b._add_grad(_unbroadcast(g, b.shape))

        return self._out(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        return self._out(-self.data, (self,), lambda g: self._add_grad(-g))

    def __sub__(self, other):
        return self + (-_wrap(other, self.dtype))

    def __rsub__(self, other):
        return _wrap(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self, other

        def bw(g):
            a._add_grad(_unbroadcast(g * b.data, a.shape))
            b._add_grad(_unbroadcast(g * a.data, b.shape))

        return self._out(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ContractError("only scalar exponents are supported")

        def bw(g):
            self._add_grad(g * exponent * self.data ** (exponent - 1))

        return self._out(self.data ** exponent, (self,), bw)

    def matmul(self, other):
        other = _wrap(other, self.dtype)
        a, b = self, other
        b_inner = b.shape[-2] if b.data.ndim > 1 else b.shape[0]
        if a.shape[-1] != b_inner:
            raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")

        def bw(g):
            a._add_grad(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
            b._add_grad(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

        return self._out(np.matmul(a.data, b.data), (a, b), bw)

    __matmul__ = matmul

    # -- shape manipulation ------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return self._out(self.data.reshape(shape), (self,),
                         lambda g: self._add_grad(g.reshape(old)))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inv = tuple(np.argsort(axes))
        return self._out(self.data.transpose(axes), (self,),
                         lambda g: self._add_grad(g.transpose(inv)))

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._add_grad(np.broadcast_to(g, shape).astype(self.dtype, copy=False))

        return self._out(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def relu(self):
        keep = (self.data > 0).astype(self.dtype)
        return self._out(self.data * keep, (self,),
                         lambda g: self._add_grad(g * keep))

    # -- backward sweep ------------------------------------------------------------

    def backward(self):
        """Populate ``.grad`` on every requires_grad leaf reachable from this scalar."""
        if self.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        self._add_grad(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # scratch grads on intermediates are dropped; leaves keep accumulating
        for node in order:
            if not node.requires_grad:
                node.grad = None


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad, shape):
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- functional ops -----------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._add_grad((g - dot) * y)

    return x._out(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bw(g):
        x._add_grad(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return x._out(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ShapeError(f"layer_norm dim mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return centered * inv * gain + bias


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows ``table[ids]``; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")

    def bw(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        scratch = np.zeros_like(table.data)
        np.add.at(scratch, ids, g)
        table.grad += scratch

    out = Tensor(table.data[ids])
    out._parents = (table,)
    out._backward = bw
    return out


def gather_last(x: Tensor, index: np.ndarray) -> Tensor:
    """out[..., i, j] = x[..., i, index[i, j]] with scatter-add backward.

    ``index`` is a 2-D integer array shared across any leading batch axes.
    """
    index = np.asarray(index, dtype=np.int64)
    idx = np.broadcast_to(index, x.shape[:-1] + (index.shape[-1],))
    out_data = np.take_along_axis(x.data, idx, axis=-1)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, _grid_indices(gx.shape, idx), g)
        x._add_grad(gx)

    return x._out(out_data, (x,), bw)


def _grid_indices(shape, last_idx):
    """Index tuple addressing positions ``last_idx`` along the final axis."""
    lead = tuple(
        np.arange(n).reshape((1,) * i + (n,) + (1,) * (last_idx.ndim - i - 1))
        for i, n in enumerate(last_idx.shape[:-1])
    )
    return lead + (last_idx,)


def add_const(x: Tensor, const) -> Tensor:
    """Add a non-differentiable constant (masks, biases baked into logits)."""
    c = np.asarray(const, dtype=x.dtype)
    return x._out(x.data + c, (x,), lambda g: x._add_grad(_unbroadcast(g, x.shape)))


def mul_const(x: Tensor, const) -> Tensor:
    """Multiply by a non-differentiable constant (dropout masks, row zeroing)."""
    c = np.asarray(const, dtype=x.dtype)
    return x._out(x.data * c, (x,),
                  lambda g: x._add_grad(_unbroadcast(g * c, x.shape)))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._add_grad(piece)

    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    out._parents = tuple(tensors)
    out._backward = bw
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return x
    if p >= 1.0:
        raise ContractError("dropout rate must be < 1")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul_const(x, keep)


def label_smoothed_nll(logits: Tensor, targets, smoothing: float, pad_id: int) -> Tensor:
    """Mean label-smoothed negative log-likelihood over non-pad positions.

    The smoothed target distribution puts 1 - smoothing on the gold class and
    spreads smoothing uniformly over the remaining V - 1 classes.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ContractError(f"smoothing must be in [0, 1), got {smoothing}")
    targets = np.asarray(targets, dtype=np.int64)
    n_rows, vocab = logits.shape
    if targets.shape != (n_rows,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits rows {n_rows}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")

    q = np.full((n_rows, vocab), smoothing / (vocab - 1), dtype=logits.dtype)
    q[np.arange(n_rows), targets] = 1.0 - smoothing
    keep = (targets != pad_id).astype(logits.dtype)[:, None]
    n_tokens = keep.sum()
    if n_tokens == 0:
        raise ContractError("all target positions are padding")

    logp = log_softmax(logits, axis=-1)
    return mul_const(logp, -q * keep / n_tokens).sum()
