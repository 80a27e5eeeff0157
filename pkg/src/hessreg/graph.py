"""Rebindable differentiable computations over named leaf tensors.

A :class:`DiffGraph` couples a builder function with declared leaf shapes.
Binding arrays to the leaves and running :meth:`forward` traces the
computation once; gradients and Hessian-vector products then reuse the
cached trace until the leaves are rebound.
"""

from __future__ import annotations

import numpy as np

from .tensor import GraphError, Tensor, grad

__all__ = ["DiffGraph"]

HESSIAN_ORACLE_LIMIT = 64


class DiffGraph:
    """A computation ``builder(leaves) -> Tensor`` with rebindable leaves.

    ``leaf_shapes`` maps leaf names to expected shapes; a ``None`` extent
    means that axis is flexible (used for batch dimensions). Forward values
    for every node are cached inside the traced tensors; rebinding any leaf
    invalidates the trace and all gradient caches.
    """

    def __init__(self, builder, leaf_shapes, bindings=None):
        self._builder = builder
        self.leaf_shapes = {k: tuple(v) for k, v in leaf_shapes.items()}
        self._bindings = {}
        self._leaves = None
        self._output = None
        self._grad_cache = {}
        if bindings:
            self.bind(**bindings)

    # ------------------------------------------------------------------

    def bind(self, **arrays):
        """Bind arrays to leaves by name, invalidating any cached trace."""
        for name, value in arrays.items():
            if name not in self.leaf_shapes:
                raise GraphError(f"unknown leaf {name!r}; have {sorted(self.leaf_shapes)}")
            arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
            self._check_shape(name, arr.shape)
            self._bindings[name] = arr
        self._leaves = None
        self._output = None
        self._grad_cache.clear()
        return self

    def _check_shape(self, name, shape):
        want = self.leaf_shapes[name]
        ok = len(shape) == len(want) and all(
            w is None or w == s for w, s in zip(want, shape)
        )
        if not ok:
            raise GraphError(f"leaf {name!r} expects shape {want}, got {shape}")

    def binding(self, name):
        return self._bindings[name]

    # ------------------------------------------------------------------

    def forward(self, **arrays):
        """Evaluate the graph, tracing it for later differentiation.

        Returns the output as a numpy array (scalar outputs come back as
        0-d arrays). All intermediate values stay cached on the trace.
        """
        if arrays:
            self.bind(**arrays)
        missing = [n for n in self.leaf_shapes if n not in self._bindings]
        if missing:
            raise GraphError(f"unbound leaves: {missing}")
        leaves = {n: Tensor(a, requires_grad=True) for n, a in self._bindings.items()}
        out = self._builder(leaves)
        if not isinstance(out, Tensor):
            raise GraphError("graph builder must return a Tensor")
        self._leaves = leaves
        self._output = out
        return out.data.copy()

    def _ensure_traced(self):
        if self._output is None:
            self.forward()
        return self._output

    @property
    def output(self):
        return self._ensure_traced()

    def leaf(self, name):
        self._ensure_traced()
        return self._leaves[name]

    def _require_scalar(self, what):
        out = self._ensure_traced()
        if out.size != 1:
            raise GraphError(f"{what} needs a scalar output, got shape {out.shape}")
        return out

    # ------------------------------------------------------------------

    def gradient(self, wrt, create_graph=False):
        """Reverse-mode gradient with respect to one leaf or several.

        A string returns a single Tensor; a sequence returns a dict keyed
        by leaf name. Traces are reused across calls at the same binding.
        """
        out = self._require_scalar("gradient")
        names = [wrt] if isinstance(wrt, str) else list(wrt)
        for n in names:
            if n not in self.leaf_shapes:
                raise GraphError(f"unknown leaf {n!r}")
        missing = [
            n for n in names if (n, create_graph) not in self._grad_cache
        ]
        if missing:
            gs = grad(out, [self._leaves[n] for n in missing], create_graph=create_graph)
            for n, g in zip(missing, gs):
                self._grad_cache[(n, create_graph)] = g
        if isinstance(wrt, str):
            return self._grad_cache[(wrt, create_graph)]
        return {n: self._grad_cache[(n, create_graph)] for n in names}

    def hvp(self, wrt, v, create_graph=False):
        """Hessian-vector product of the scalar output w.r.t. leaf ``wrt``.

        Computed as the gradient of ``<grad, v>`` (second application of
        reverse mode); never forms the Hessian. With ``create_graph`` the
        result can be differentiated further, e.g. for directions or
        parameters.
        """
        self._require_scalar("hvp")
        v_arr = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
        leaf = self.leaf(wrt)
        if v_arr.shape != leaf.shape:
            raise GraphError(
                f"hvp direction shape {v_arr.shape} does not match leaf {wrt!r} shape {leaf.shape}"
            )
        gx = self.gradient(wrt, create_graph=True)
        v_t = v if isinstance(v, Tensor) else Tensor(v_arr)
        s = (gx * v_t).sum()
        return grad(s, leaf, create_graph=create_graph)

    def hvp_graph(self, wrt, v_t):
        """Like :meth:`hvp` but keeps the result differentiable and accepts
        a live Tensor direction, so downstream norms can be differentiated
        with respect to both the direction and other leaves."""
        return self.hvp(wrt, v_t, create_graph=True)

    def explicit_hessian(self, wrt, limit=HESSIAN_ORACLE_LIMIT):
        """Dense Hessian assembled column-by-column from Hessian-vector
        products. A test oracle: refuses dimensions above ``limit``."""
        self._require_scalar("explicit_hessian")
        leaf = self.leaf(wrt)
        d = leaf.size
        if d > limit:
            raise GraphError(
                f"explicit_hessian limited to {limit} dims (got {d}); use hvp instead"
            )
        h = np.zeros((d, d))
        for i in range(d):
            e = np.zeros(d)
            e[i] = 1.0
            h[:, i] = self.hvp(wrt, e.reshape(leaf.shape)).data.ravel()
        return h
