"""Dense float64 tensors with reverse-mode automatic differentiation.

The one structural decision that everything downstream leans on: every
backward pass is written in terms of the same primitive ops as the forward
pass.  Differentiating an expression therefore yields another expression in
the graph, so gradients of gradients work to any depth.  Hessian-vector
products are the second derivative of a scalar graph taken in a direction,
and gradients of their norms (with respect to probe directions or model
parameters) are third-level derivatives; all of them fall out of the same
machinery with no special cases.

Everything is 64-bit. Second-order quantities and the finite-difference
checks in the test suite are too noisy in float32.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "as_tensor",
    "concat",
    "grad",
    "log_sum_exp",
    "no_grad",
    "row_l2_norm",
    "sigmoid",
    "swish",
    "unfold2d",
]


class GraphError(ValueError):
    """Raised for malformed graph operations (shape mismatches, bad axes)."""


_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def _grad_mode(enabled):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = enabled
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An immutable dense float64 array, optionally recorded on a graph.

    ``_vjps`` holds one closure per parent; each maps the output adjoint to
    that parent's adjoint contribution, built out of Tensor ops so the
    result is differentiable again.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjps", "_op", "_id")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjps = ()
        self._op = "leaf"
        self._id = next(_ids)

    # ------------------------------------------------------------------
    # construction helpers

    @staticmethod
    def _result(data, op, parents, vjps):
        out = Tensor.__new__(Tensor)
        out.data = data if data.dtype == np.float64 else data.astype(np.float64)
        record = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = record
        out._parents = tuple(parents) if record else ()
        out._vjps = tuple(vjps) if record else ()
        out._op = op
        out._id = next(_ids)
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        """A view of the same values with no graph history."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(op={self._op!r}, shape={self.shape}, grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # arithmetic

    def __add__(self, other):
        other = as_tensor(other)
        data = self.data + other.data
        return Tensor._result(
            data,
            "add",
            (self, other),
            (
                lambda g, s=self.shape: _unbroadcast(g, s),
                lambda g, s=other.shape: _unbroadcast(g, s),
            ),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._result(-self.data, "neg", (self,), (lambda g: -g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        data = self.data * other.data
        return Tensor._result(
            data,
            "mul",
            (self, other),
            (
                lambda g, o=other, s=self.shape: _unbroadcast(g * o, s),
                lambda g, o=self, s=other.shape: _unbroadcast(g * o, s),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * as_tensor(other).pow(-1.0)

    def __rtruediv__(self, other):
        return as_tensor(other) * self.pow(-1.0)

    def pow(self, c):
        """Elementwise power with a constant exponent."""
        c = float(c)
        data = self.data**c
        return Tensor._result(
            data,
            "pow",
            (self,),
            (lambda g, x=self, c=c: g * (c * x.pow(c - 1.0)),),
        )

    __pow__ = pow

    def sqrt(self):
        return self.pow(0.5)

    def exp(self):
        data = np.exp(self.data)
        out = Tensor._result(data, "exp", (self,), ())
        out._vjps = (lambda g, o=out: g * o,)
        return out

    def log(self):
        data = np.log(self.data)
        return Tensor._result(data, "log", (self,), (lambda g, x=self: g / x,))

    def abs(self):
        # Sign is captured as a constant: correct almost everywhere, and the
        # only consumers are evaluation-mode q-norms (q in {1, inf}).
        sign = Tensor(np.sign(self.data))
        return Tensor._result(np.abs(self.data), "abs", (self,), (lambda g, s=sign: g * s,))

    # ------------------------------------------------------------------
    # linear algebra and shape ops

    def matmul(self, other):
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2:
            raise GraphError(
                f"matmul needs 2-D operands, got {self.shape} @ {other.shape}"
            )
        if self.shape[1] != other.shape[0]:
            raise GraphError(f"matmul shape mismatch: {self.shape} @ {other.shape}")
        data = self.data @ other.data
        return Tensor._result(
            data,
            "matmul",
            (self, other),
            (
                lambda g, b=other: g.matmul(b.transpose()),
                lambda g, a=self: a.transpose().matmul(g),
            ),
        )

    __matmul__ = matmul

    def transpose(self):
        if self.ndim != 2:
            raise GraphError(f"transpose needs a 2-D tensor, got {self.shape}")
        return Tensor._result(
            self.data.T.copy(), "transpose", (self,), (lambda g: g.transpose(),)
        )

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)
        return Tensor._result(
            data, "reshape", (self,), (lambda g, s=self.shape: g.reshape(s),)
        )

    def broadcast_to(self, shape):
        shape = tuple(shape)
        data = np.broadcast_to(self.data, shape).copy()
        return Tensor._result(
            data, "broadcast", (self,), (lambda g, s=self.shape: _unbroadcast(g, s),)
        )

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
        in_shape = self.shape

        def vjp(g, axis=axis, keepdims=keepdims, in_shape=in_shape):
            if axis is None:
                return g.reshape((1,) * len(in_shape)).broadcast_to(in_shape)
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(a % len(in_shape) for a in axes)
            if not keepdims:
                kept = [1 if a in axes else in_shape[a] for a in range(len(in_shape))]
                g = g.reshape(kept)
            return g.broadcast_to(in_shape)

        return Tensor._result(data, "sum", (self,), (vjp,))

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def __getitem__(self, key):
        data = self.data[key]
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
        return Tensor._result(
            data,
            "slice",
            (self,),
            (lambda g, s=self.shape, k=key: _scatter(g, s, k),),
        )

    # numpy-facing conveniences -----------------------------------------

    def norm(self):
        """Euclidean norm of all entries, as a graph scalar."""
        return (self * self).sum().sqrt()


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------
# primitive helpers used by backward passes


def _unbroadcast(g, shape):
    """Reduce ``g`` back to ``shape`` by summing broadcast axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if g.shape != shape:
        g = g.reshape(shape)
    return g


def _scatter(g, shape, key):
    """Inverse of basic slicing: place ``g`` into zeros of ``shape``."""
    data = np.zeros(shape, dtype=np.float64)
    data[key] = g.data
    return Tensor._result(data, "scatter", (g,), (lambda gg, k=key: gg[k],))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            key = tuple(
                slice(lo, hi) if a == axis % g.ndim else slice(None)
                for a in range(g.ndim)
            )
            return g[key]

        return vjp

    return Tensor._result(
        data, "concat", tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors)))
    )


# ----------------------------------------------------------------------
# nonlinearities


def sigmoid(x):
    x = as_tensor(x)
    d = x.data
    data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor._result(data, "sigmoid", (x,), ())
    out._vjps = (lambda g, o=out: g * (o * (1.0 - o)),)
    return out


def swish(x):
    """x * sigmoid(x); smooth and twice differentiable everywhere."""
    x = as_tensor(x)
    return x * sigmoid(x)


def log_sum_exp(x, axis=-1, keepdims=False):
    """Numerically stable log-sum-exp along ``axis``.

    The max shift enters as a constant; the resulting derivative is exactly
    softmax, so higher derivatives stay exact as well.
    """
    x = as_tensor(x)
    m = Tensor(np.max(x.data, axis=axis, keepdims=True))
    s = (x - m).exp().sum(axis=axis, keepdims=True).log() + m
    if not keepdims:
        s = s.reshape(np.squeeze(s.data, axis=axis).shape)
    return s


def row_l2_norm(x, zero_rows_to_zero=True):
    """Per-row Euclidean norm of a 2-D tensor, shaped (rows,).

    Rows that are exactly zero are mapped to value 0 with zero gradient (a
    valid subgradient of the norm at its minimum). Without the guard the
    sqrt backward would divide by zero.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise GraphError(f"row_l2_norm needs a 2-D tensor, got {x.shape}")
    sq = (x * x).sum(axis=1)
    if not zero_rows_to_zero:
        return sq.sqrt()
    zero = (sq.data == 0.0).astype(np.float64)
    if not zero.any():
        return sq.sqrt()
    pad = Tensor(zero)
    keep = Tensor(1.0 - zero)
    return (sq + pad).sqrt() * keep


# ----------------------------------------------------------------------
# 2-D convolution support (gather/scatter pair; both linear)


def unfold2d(x, kh, kw, stride, pad):
    """Extract (kh, kw) patches from an NHWC tensor.

    Output is (N, OH, OW, kh*kw*C) with columns ordered (kh, kw, C). The
    backward pass is the scatter-add ``_fold2d``; the pair is linear, so
    convolutions built on top are differentiable to any order.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise GraphError(f"unfold2d needs an NHWC tensor, got {x.shape}")
    n, h, w, c = x.shape
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise GraphError(
            f"unfold2d: window {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    data = _unfold_np(x.data, kh, kw, stride, pad)
    args = (x.shape, kh, kw, stride, pad)
    return Tensor._result(
        data, "unfold2d", (x,), (lambda g, a=args: _fold2d(g, *a),)
    )


def _unfold_np(arr, kh, kw, stride, pad):
    if pad:
        arr = np.pad(arr, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    n, h, w, c = arr.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(arr, (kh, kw), axis=(1, 2))
    win = win[:, :: stride, :: stride]  # (N, OH, OW, C, kh, kw)
    win = win[:, :oh, :ow]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        n, oh, ow, kh * kw * c
    )


def _fold2d(g, x_shape, kh, kw, stride, pad):
    """Scatter-add patches back to input positions (adjoint of unfold2d)."""
    n, h, w, c = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    data = np.zeros((n, hp, wp, c), dtype=np.float64)
    g6 = g.data.reshape(n, oh, ow, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            data[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += g6[
                :, :, :, i, j, :
            ]
    if pad:
        data = data[:, pad : hp - pad, pad : wp - pad, :]
    args = (kh, kw, stride, pad)
    return Tensor._result(
        data, "fold2d", (g,), (lambda gg, a=args: unfold2d(gg, *a),)
    )


# ----------------------------------------------------------------------
# reverse-mode differentiation


def grad(output, wrt, create_graph=False):
    """Gradients of a scalar ``output`` with respect to tensors in ``wrt``.

    Returns one Tensor per entry of ``wrt`` (zeros when the output does not
    depend on it). With ``create_graph`` the returned gradients are
    themselves recorded, so they can be differentiated again.
    """
    single = isinstance(wrt, Tensor)
    wrt_list = [wrt] if single else list(wrt)
    if output.size != 1:
        raise GraphError(f"grad needs a scalar output, got shape {output.shape}")

    wrt_ids = {id(t) for t in wrt_list}

    # Sub-DAG reachable from the output, found iteratively (graphs from
    # nested differentiation can be deep).
    nodes = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack.extend(node._parents)

    # A node needs an adjoint iff some wrt tensor is reachable through it.
    needed = {}
    order = sorted(nodes.values(), key=lambda t: t._id)
    for node in order:  # parents precede children in construction order
        needed[id(node)] = id(node) in wrt_ids or any(
            needed.get(id(p), False) for p in node._parents
        )

    adjoints = {id(output): Tensor(np.ones(output.shape))}
    with _grad_mode(create_graph):
        for node in reversed(order):
            a = adjoints.pop(id(node), None)
            if a is None or not needed.get(id(node), False):
                continue
            if id(node) in wrt_ids:
                # Fold repeated wrt entries back in below via the map.
                adjoints[id(node)] = a
            for parent, vjp in zip(node._parents, node._vjps):
                if not needed.get(id(parent), False):
                    continue
                contribution = vjp(a)
                prev = adjoints.get(id(parent))
                adjoints[id(parent)] = contribution if prev is None else prev + contribution

    results = []
    for t in wrt_list:
        g = adjoints.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape))
        results.append(g)
    return results[0] if single else results
