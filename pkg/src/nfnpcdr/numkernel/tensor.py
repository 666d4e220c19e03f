"""Dense float64 tensors with tape-style reverse-mode gradients.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks
that graph once in reverse topological order. Graphs are rebuilt on every
forward pass, which is cheap at the sizes this package works with.
"""

from __future__ import annotations

import contextlib
import contextvars

import numpy as np

from .. import kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A caller broke an op's precondition."""


_grad_enabled = contextvars.ContextVar("nfnpcdr_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a trace."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled():
    return _grad_enabled.get()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- convenience --------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- operators ----------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


class ParameterBlock(Tensor):
    """A named, trainable leaf whose gradient lives alongside its value."""

    __slots__ = ("name", "trainable")

    def __init__(self, name, value, trainable=True):
        super().__init__(value, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"ParameterBlock({self.name!r}, shape={self.data.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- backward pass ----------------------------------------------------------


def _topo_order(root):
    order = []
    seen = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            stack.pop()
            order.append(node)
    return order


def backward(seed):
    """Accumulate d(seed)/d(leaf) into every reachable leaf's ``grad``.

    ``seed`` must be a scalar (shape ``()``) produced by a traced computation.
    """
    if not isinstance(seed, Tensor) or seed.data.shape != ():
        shape = getattr(seed, "shape", None)
        raise ContractError(f"backward seed must be a scalar tensor, got shape {shape}")
    if not seed.requires_grad:
        raise ContractError("backward seed does not depend on any trainable tensor")
    grads = {id(seed): np.ones(())}
    for node in reversed(_topo_order(seed)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- elementwise arithmetic ---------------------------------------------------


def _binary(fn, a, b, name):
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"{name}: cannot broadcast {a.data.shape} with {b.data.shape}") from exc


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _node(_binary(np.add, a, b, "add"), (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _node(_binary(np.subtract, a, b, "sub"), (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(_binary(np.multiply, a, b, "mul"), (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = _binary(np.true_divide, a, b, "div")

    def back(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * out / bd, bd.shape))

    return _node(out, (a, b), back)


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    """``a ** exponent`` for a constant real exponent."""
    a = as_tensor(a)
    p = float(exponent)
    ad = a.data
    return _node(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def square(a):
    a = as_tensor(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def tabs(a):
    a = as_tensor(a)
    ad = a.data
    return _node(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def clip(a, lo, hi):
    """Clamp values; gradient is zero where clamped."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _node(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


# -- activations --------------------------------------------------------------


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def relu(a):
    a = as_tensor(a)
    # subgradient at exactly 0 is 0
    on = a.data > 0.0
    return _node(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = as_tensor(a)
    ad = a.data
    return _node(np.logaddexp(0.0, ad), (a,), lambda g: (g * _sigmoid(ad),))


def identity(a):
    return as_tensor(a)


ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "identity": identity}


# -- linear algebra and shape ---------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2) or ad.shape[-1] != bd.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def back(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2:
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad

    return _node(ad @ bd, (a, b), back)


def transpose(a):
    a = as_tensor(a)
    return _node(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shape mismatch: {[d.shape for d in datas]}") from exc
    cuts = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(a, index):
    """Gather rows ``a[index]`` along axis 0; gradients scatter-add back."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    shape = a.data.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), back)


def broadcast_to(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    return _node(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, old),))


# -- reductions ----------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    """Fixed-order (sequential) sum."""
    a = as_tensor(a)
    shape = a.data.shape
    out = kernels.sequential_sum(a.data, axis, keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (a,), back)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis, keepdims) / float(n)


def segment_mean(a, seg, n_seg):
    """Row means per segment, bit-identical under any row permutation.

    ``a`` is (R, d); row r belongs to segment ``seg[r]``. Every segment must
    be non-empty.
    """
    a = as_tensor(a)
    seg = np.asarray(seg, dtype=np.int64)
    if a.data.ndim != 2 or seg.shape != (a.data.shape[0],):
        raise DimensionError(f"segment_mean expects (R, d) rows and (R,) ids, got "
                             f"{a.data.shape} and {seg.shape}")
    counts = np.bincount(seg, minlength=n_seg).astype(np.float64)
    if n_seg == 0 or np.any(counts == 0):
        raise ContractError("segment_mean: every segment needs at least one row")
    out = kernels.segment_sorted_sum(a.data, seg, n_seg) / counts[:, None]
    return _node(out, (a,), lambda g: ((g / counts[:, None])[seg],))
