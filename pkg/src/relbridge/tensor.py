"""Dense float64 tensors with reverse-mode automatic differentiation.

Only what the table encoder, the graph encoder and the classification head
need: rank <= 3, row-vector broadcasting, and a handful of fused ops
(layer norm, softmax, masked cross-entropy) with hand-written gradients.

Forward reductions over a row use a fixed left-to-right order, so the value
computed for a row never depends on which other rows share the batch.
"""
import numpy as np

from . import kernels
from .errors import DimensionError, InvalidArgumentError, PreconditionError

MAX_RANK = 3


class Tensor:
    """A float64 array that records how it was computed.

    ``requires_grad`` tensors get a ``grad`` buffer filled by :func:`backward`.
    """

    def __init__(self, data, requires_grad=False, _parents=(), _op=None, _backward=None):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim > MAX_RANK:
            raise DimensionError(f"tensor rank {data.ndim} exceeds {MAX_RANK}: shape {data.shape}")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._op = _op
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, other: add(self, other)
    __mul__ = lambda self, other: mul(self, other)
    __sub__ = lambda self, other: sub(self, other)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: scale(self, -1.0)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, name=""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, op, grad_fn):
    """Wrap ``data``; attach ``grad_fn(g) -> tuple of parent grads`` if needed."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, op, grad_fn)
    return Tensor(data, _op=op)


# ---------------------------------------------------------------- elementwise


def _check_broadcast(a, b, op):
    if a.shape == b.shape:
        return
    for big, small in ((a, b), (b, a)):
        if small.ndim == 1 and big.ndim >= 1 and big.shape[-1] == small.shape[0]:
            return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    # only row-vector broadcasting is allowed, so collapse every leading axis
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), "add", grad_fn)


def sub(a, b):
    return add(a, scale(b, -1.0))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), "mul", grad_fn)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), "scale", lambda g: (g * c,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def elementwise(op, *inputs):
    """Dispatch by name: ``add``, ``mul``, ``relu`` or ``("scale", c)``."""
    if isinstance(op, tuple) and op[0] == "scale":
        return scale(inputs[0], op[1])
    table = {"add": add, "mul": mul, "relu": relu, "sub": sub}
    if op not in table:
        raise InvalidArgumentError(f"unknown elementwise op {op!r}")
    return table[op](*inputs)


def dropout(a, p, rng, training=True):
    """Inverted dropout; identity when not training or ``p == 0``."""
    a = as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise InvalidArgumentError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _result(a.data * keep, (a,), "dropout", lambda g: (g * keep,))


# ---------------------------------------------------------------- products


def matmul(a, b):
    """``a @ b`` for ``a`` of shape ``(m, k)`` or ``(B, m, k)`` and ``b`` of ``(k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, a.shape[-1])
    out = kernels.matmul(a2, b.data).reshape(*lead, b.shape[1])

    def grad_fn(g):
        g2 = g.reshape(-1, b.shape[1])
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), "matmul", grad_fn)


def bmm(a, b):
    """Batched product ``(B, m, k) @ (B, k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm: shapes {a.shape} and {b.shape} do not align")

    def grad_fn(g):
        ga = np.matmul(g, b.data.transpose(0, 2, 1)) if a.requires_grad else None
        gb = np.matmul(a.data.transpose(0, 2, 1), g) if b.requires_grad else None
        return ga, gb

    return _result(kernels.bmm(a.data, b.data), (a, b), "bmm", grad_fn)


def spmm(adj, x):
    """Constant sparse matrix times a dense tensor; gradients flow to ``x`` only."""
    x = as_tensor(x)
    if x.ndim != 2 or adj.n_cols != x.shape[0]:
        raise DimensionError(f"spmm: sparse {adj.shape} and dense {x.shape} do not align")
    indptr, indices, values = adj.csr()

    def grad_fn(g):
        t_indptr, t_indices, t_values = adj.csr_transpose()
        return (kernels.spmm(t_indptr, t_indices, t_values, g),)

    return _result(kernels.spmm(indptr, indices, values, x.data), (x,), "spmm", grad_fn)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, (a,), "transpose", lambda g: (g.transpose(inverse),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InvalidArgumentError("concat of an empty list")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        other = [s for i, s in enumerate(t.shape) if i != ax]
        ref = [s for i, s in enumerate(tensors[0].shape) if i != ax]
        if t.ndim != ndim or other != ref:
            raise DimensionError(f"concat: shapes {[x.shape for x in tensors]} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def grad_fn(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), "concat", grad_fn)


def narrow(a, axis, start, stop):
    """Contiguous slice ``start:stop`` along ``axis``."""
    a = as_tensor(a)
    ax = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def grad_fn(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return _result(a.data[idx], (a,), "narrow", grad_fn)


def take_rows(a, index):
    """Gather rows ``a[index]``; repeated indices accumulate their gradients."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise InvalidArgumentError(f"row index out of range for {a.shape[0]} rows")

    def grad_fn(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), "take_rows", grad_fn)


def embedding(table, codes):
    """Embedding lookup: ``table[codes]``."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= table.shape[0]):
        raise InvalidArgumentError(
            f"code {int(codes.max())} out of range for vocabulary of size {table.shape[0]}"
        )
    return take_rows(table, codes)


# ---------------------------------------------------------------- reductions


def _rowsum(x):
    """Sum over the last axis, strictly left to right."""
    acc = np.zeros(x.shape[:-1])
    for k in range(x.shape[-1]):
        acc += x[..., k]
    return acc


def sum(a):
    a = as_tensor(a)
    shape = a.shape
    return _result(np.sum(a.data), (a,), "sum", lambda g: (np.full(shape, g),))


def mean(a):
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _result(np.mean(a.data), (a,), "mean", lambda g: (np.full(shape, g / n),))


def softmax(a):
    """Softmax over the last axis."""
    a = as_tensor(a)
    e = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    y = e / _rowsum(e)[..., None]

    def grad_fn(g):
        return (y * (g - _rowsum(g * y)[..., None]),)

    return _result(y, (a,), "softmax", grad_fn)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then apply the affine ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} for width {d}")
    mu = _rowsum(x.data) / d
    xc = x.data - mu[..., None]
    inv = 1.0 / np.sqrt(_rowsum(xc * xc) / d + eps)
    xhat = xc * inv[..., None]

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv[..., None] * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm", grad_fn)


def softmax_cross_entropy(logits, labels, mask=None):
    """Mean of ``-log softmax(logits)[i, labels[i]]`` over the masked rows.

    ``mask`` is a boolean row mask or an index array; ``None`` means every row.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {logits.shape}")
    n, n_classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match {n} rows")
    if mask is None:
        rows = np.arange(n)
    else:
        mask = np.asarray(mask)
        rows = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    if rows.size == 0:
        raise InvalidArgumentError("cross-entropy mask selects no rows")
    y = labels[rows]
    if y.min() < 0 or y.max() >= n_classes:
        raise InvalidArgumentError(f"label out of range [0, {n_classes}) among masked rows")
    z = logits.data[rows]
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = _rowsum(e)
    nll = np.log(s) - shifted[np.arange(rows.size), y]
    loss = np.sum(nll) / rows.size

    def grad_fn(g):
        p = e / s[:, None]
        p[np.arange(rows.size), y] -= 1.0
        full = np.zeros(logits.shape)
        np.add.at(full, rows, p * (g / rows.size))
        return (full,)

    return _result(loss, (logits,), "softmax_cross_entropy", grad_fn)


# ---------------------------------------------------------------- backprop


def _topological(root):
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


def backward(loss, params=None):
    """Fill ``grad`` on every tensor reachable from the scalar ``loss``.

    Leaf gradients accumulate into an existing buffer.  Every tensor in
    ``params`` that the loss does not reach gets a zero gradient.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise InvalidArgumentError("backward was already called on this graph")
    loss._consumed = True
    grads = {id(loss): np.ones(())}
    if loss.requires_grad:
        for node in reversed(_topological(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    for p in params or ():
        if p.grad is None:
            p.grad = np.zeros(p.shape)


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction; clears gradients after each step."""

    def __init__(self, params, lr=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self):
        missing = [p.name or repr(p) for p in self.params if p.grad is None]
        if missing:
            raise PreconditionError(f"no gradient for parameters {missing}; call backward first")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None
