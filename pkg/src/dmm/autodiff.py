"""Minimal reverse-mode automatic differentiation on numpy arrays.

Tensors record the ops that produced them; ``grad`` runs the reverse
sweep. Backward rules are written in terms of Tensor ops themselves, so
the result of ``grad`` carries its own tape and can be differentiated
again (needed for divergence terms of learned vector fields).
"""

import numpy as np


class Tensor:
    """A float64 array plus the recipe that produced it."""

    __slots__ = ("data", "parents", "vjp")

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self.vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # arithmetic

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -astensor(other))

    def __rsub__(self, other):
        return add(astensor(other), -self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(astensor(other), self)

    def __pow__(self, c):
        return power(self, c)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def astensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _sum_to_shape(g, shape):
    """Reverse numpy broadcasting: reduce g down to the given shape."""
    while g.ndim > len(shape):
        g = tsum(g, axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = astensor(a), astensor(b)
    out = Tensor(a.data + b.data, (a, b))
    out.vjp = lambda g: (_sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape))
    return out


def mul(a, b):
    a, b = astensor(a), astensor(b)
    out = Tensor(a.data * b.data, (a, b))
    out.vjp = lambda g: (_sum_to_shape(g * b, a.shape), _sum_to_shape(g * a, b.shape))
    return out


def div(a, b):
    a, b = astensor(a), astensor(b)
    out = Tensor(a.data / b.data, (a, b))
    out.vjp = lambda g: (
        _sum_to_shape(g / b, a.shape),
        _sum_to_shape(-(g * a) / (b * b), b.shape),
    )
    return out


def power(a, c):
    a = astensor(a)
    c = float(c)
    out = Tensor(a.data**c, (a,))
    out.vjp = lambda g: (g * (c * power(a, c - 1.0)),)
    return out


def exp(a):
    a = astensor(a)
    out = Tensor(np.exp(a.data), (a,))
    out.vjp = lambda g: (g * out,)
    return out


def log(a):
    a = astensor(a)
    out = Tensor(np.log(a.data), (a,))
    out.vjp = lambda g: (g / a,)
    return out


def tanh(a):
    a = astensor(a)
    out = Tensor(np.tanh(a.data), (a,))
    out.vjp = lambda g: (g * (1.0 - out * out),)
    return out


def sin(a):
    a = astensor(a)
    out = Tensor(np.sin(a.data), (a,))
    out.vjp = lambda g: (g * cos(a),)
    return out


def cos(a):
    a = astensor(a)
    out = Tensor(np.cos(a.data), (a,))
    out.vjp = lambda g: (-(g * sin(a)),)
    return out


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    out = Tensor(a.data @ b.data, (a, b))
    out.vjp = lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g))
    return out


def tsum(a, axis=None, keepdims=False):
    a = astensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims), (a,))

    def vjp(g):
        if axis is None:
            return (broadcast_to(reshape(g, (1,) * a.ndim), a.shape),)
        if not keepdims:
            kshape = list(a.shape)
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in axes:
                kshape[ax] = 1
            g = reshape(g, tuple(kshape))
        return (broadcast_to(g, a.shape),)

    out.vjp = vjp
    return out


def tmean(a, axis=None, keepdims=False):
    a = astensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def broadcast_to(a, shape):
    a = astensor(a)
    out = Tensor(np.broadcast_to(a.data, shape), (a,))
    out.vjp = lambda g: (_sum_to_shape(g, a.shape),)
    return out


def reshape(a, shape):
    a = astensor(a)
    out = Tensor(a.data.reshape(shape), (a,))
    out.vjp = lambda g: (reshape(g, a.shape),)
    return out


def transpose(a, axes=None):
    a = astensor(a)
    out = Tensor(np.transpose(a.data, axes), (a,))
    inv = None if axes is None else tuple(np.argsort(axes))
    out.vjp = lambda g: (transpose(g, inv),)
    return out


def getitem(a, idx):
    a = astensor(a)
    out = Tensor(a.data[idx], (a,))
    out.vjp = lambda g: (scatter(g, idx, a.shape),)
    return out


def scatter(g, idx, shape):
    """Place g into zeros of the given shape at idx, accumulating duplicates."""
    g = astensor(g)
    buf = np.zeros(shape)
    np.add.at(buf, idx, g.data)
    out = Tensor(buf, (g,))
    out.vjp = lambda gg: (getitem(gg, idx),)
    return out


def concat(parts, axis=0):
    parts = [astensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for i, p in enumerate(parts):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(getitem(g, tuple(sl)))
        return tuple(grads)

    out.vjp = vjp
    return out


def where(cond, a, b):
    """Select with a constant boolean mask (no gradient through cond)."""
    cond = np.asarray(cond, dtype=bool)
    a, b = astensor(a), astensor(b)
    out = Tensor(np.where(cond, a.data, b.data), (a, b))
    mask = cond.astype(np.float64)
    out.vjp = lambda g: (
        _sum_to_shape(g * mask, a.shape),
        _sum_to_shape(g * (1.0 - mask), b.shape),
    )
    return out


def sigmoid(a):
    return 1.0 / (1.0 + exp(-astensor(a)))


def silu(a):
    a = astensor(a)
    return a * sigmoid(a)


def logsumexp(a, axis=-1, keepdims=False):
    a = astensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a - m
    s = log(tsum(exp(shifted), axis=axis, keepdims=True)) + m
    return s if keepdims else reshape(s, np.squeeze(s.data, axis=axis).shape)


def softmax(a, axis=-1):
    a = astensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = exp(a - m)
    return e / tsum(e, axis=axis, keepdims=True)


def grad(out, inputs, grad_out=None):
    """Gradients of ``out`` with respect to ``inputs``.

    The returned tensors carry their own tape, so they may be fed back
    into further Tensor computations and differentiated again.
    """
    if grad_out is None:
        if out.data.size != 1:
            raise ValueError("grad of a non-scalar needs an explicit grad_out")
        grad_out = Tensor(np.ones_like(out.data))

    topo, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(out): grad_out}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        for p, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg

    return [grads.get(id(x), Tensor(np.zeros_like(x.data))) for x in inputs]
