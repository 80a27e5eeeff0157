"""Input-Hessian operator norms by projected gradient ascent.

For a scalar margin f with Hessian H at x, the (p,q) operator norm is
sup{ ||H v||_q : ||v||_p = 1 }. It is estimated by ascending v along
the gradient of ||H v||_q (one Hessian-vector product per step) and
renormalizing, keeping the best iterate seen. The |Hg| estimator applies
H to the normalized input gradient instead; it can only underestimate.

Ascent needs d||Hv||_q/dv, which is implemented for q = 2 only; plain
evaluation supports q in {1, 2, inf}. Batched variants treat the rows of
the input leaf as independent samples (the summed margin has a
block-diagonal Hessian across rows), which is also how multiple restarts
run in one pass: replicate the row, one restart per copy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import GraphError, Tensor, grad, row_l2_norm

__all__ = [
    "OpNormProbe",
    "OpNormEstimate",
    "g_eval",
    "estimate_opnorm",
    "estimate_opnorm_rows",
    "hg_estimate",
    "hg_direction",
]

_SUPPORTED_PQ = {(2.0, 2.0), (1.0, np.inf), (np.inf, 1.0)}


def _canon_exponent(e):
    e = float(e)
    if e not in (1.0, 2.0, np.inf):
        raise GraphError(f"unsupported norm exponent {e}; use 1, 2 or inf")
    return e


@dataclass
class OpNormProbe:
    """Ascent hyperparameters: step size ``o``, iteration count ``T`` and
    the conjugate exponent pair (p for the constraint, q for the value).
    ``v0`` optionally fixes the first start's initial direction."""

    o: float = 0.1
    T: int = 10
    p: float = 2.0
    q: float = 2.0
    v0: np.ndarray | None = None

    def __post_init__(self):
        if not self.o > 0:
            raise GraphError(f"ascent step must be positive, got {self.o}")
        if self.T < 1:
            raise GraphError(f"need at least one iteration, got T={self.T}")
        self.p = _canon_exponent(self.p)
        self.q = _canon_exponent(self.q)
        if (self.p, self.q) not in _SUPPORTED_PQ:
            raise GraphError(
                f"(p, q) must be conjugate (1/p + 1/q = 1), got ({self.p}, {self.q})"
            )


@dataclass
class OpNormEstimate:
    value: float
    v_star: np.ndarray
    iterations_used: int
    degenerate: bool = False  # every probed direction had Hv == 0
    start_values: np.ndarray | None = field(default=None, repr=False)
    # the ascent's last iterate, which may lag v_star (the best one);
    # the training loop freezes this, the plain estimator reports best
    v_last: np.ndarray | None = field(default=None, repr=False)


# ----------------------------------------------------------------------
# norms and direction bookkeeping


def _qnorm(arr, q):
    flat = np.asarray(arr).ravel()
    if q == 1.0:
        return float(np.sum(np.abs(flat)))
    if q == 2.0:
        return float(np.sqrt(np.sum(flat * flat)))
    return float(np.max(np.abs(flat))) if flat.size else 0.0


def _row_qnorms(arr, q):
    flat = arr.reshape(arr.shape[0], -1)
    if q == 1.0:
        return np.sum(np.abs(flat), axis=1)
    if q == 2.0:
        return np.sqrt(np.sum(flat * flat, axis=1))
    return np.max(np.abs(flat), axis=1)


def _renorm_rows(v, p):
    """Project rows onto the unit p-sphere; zero rows are left alone (the
    caller treats them as stuck)."""
    norms = _row_qnorms(v, p)
    safe = np.where(norms > 0, norms, 1.0)
    shape = (-1,) + (1,) * (v.ndim - 1)
    return v / safe.reshape(shape), norms > 0


def _leaf_want(margin):
    if "x" not in margin.leaf_shapes:
        raise GraphError("operator norms need a margin graph with an 'x' leaf")
    return margin.leaf_shapes["x"]


def _bind_point(margin, x):
    """Bind a single input to the graph's x leaf, adding the row axis if
    the caller passed a bare sample."""
    want = _leaf_want(margin)
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == len(want) - 1:
        arr = arr[None]
    margin.bind(x=arr)
    return margin


def _single_row(margin, x, op_name):
    if x is not None:
        _bind_point(margin, x)
    bound = margin.binding("x")
    if bound.shape[0] != 1:
        raise GraphError(
            f"{op_name} expects a single-row input, got batch of {bound.shape[0]};"
            " use the rows variant"
        )
    return bound


def _as_rows(v, want, b):
    """Coerce a direction into (b, *sample_shape), accepting one sample's
    shape when b == 1."""
    arr = np.asarray(v, dtype=np.float64)
    sample = tuple(want[1:])
    if arr.shape == sample and b == 1:
        arr = arr[None]
    if arr.shape != (b,) + sample:
        raise GraphError(f"direction shape {arr.shape} does not match {(b,) + sample}")
    return arr


# ----------------------------------------------------------------------
# evaluation


def g_eval(margin, x=None, v=None, p=2.0, q=2.0):
    """||H v||_q for a unit-p-norm direction v, via one HVP."""
    if v is None:
        raise GraphError("g_eval needs a direction v")
    p, q = _canon_exponent(p), _canon_exponent(q)
    bound = _single_row(margin, x, "g_eval")
    v = _as_rows(v, margin.leaf_shapes["x"], 1)
    vn = _qnorm(v, p)
    if abs(vn - 1.0) > 1e-6:
        raise GraphError(f"g_eval needs a unit direction, got ||v||_p = {vn}")
    hv = margin.hvp("x", v).data
    return _qnorm(hv, q)


def hg_direction(margin, x=None, p=2.0):
    """Normalized input gradient of the margin, or None where it vanishes."""
    _single_row(margin, x, "hg_direction")
    g = margin.gradient("x").data
    gn = _qnorm(g, _canon_exponent(p))
    if gn == 0.0:
        return None
    return g / gn


def hg_estimate(margin, x=None, p=2.0, q=2.0, with_flag=False):
    """||H (grad f / ||grad f||_p)||_q: curvature along the gradient ray.

    Bounded above by the operator norm, so it underestimates whenever the
    top curvature direction is not the gradient direction. A vanishing
    gradient returns 0 (flagged when ``with_flag``)."""
    q = _canon_exponent(q)
    d = hg_direction(margin, x, p)
    if d is None:
        return (0.0, True) if with_flag else 0.0
    value = _qnorm(margin.hvp("x", d).data, q)
    return (value, False) if with_flag else value


# ----------------------------------------------------------------------
# ascent


def _ascent_rows(margin, v0, probe, trace=None):
    """Projected ascent on every row at once. Returns per-row best values,
    the attaining directions, and a per-row stuck-at-zero mask."""
    if probe.q != 2.0:
        raise GraphError("ascent needs q = 2 (d||Hv||_q/dv implemented for q=2 only)")
    b = v0.shape[0]
    d = int(np.prod(v0.shape[1:])) if v0.ndim > 1 else 1
    v, alive = _renorm_rows(v0, probe.p)
    if not np.all(alive):
        raise GraphError("initial ascent directions must be nonzero")
    if trace is not None:
        trace("init", v.copy())

    best_val = np.full(b, -np.inf)
    best_v = v.copy()

    def _record(vals, cur):
        nonlocal best_val, best_v
        better = vals > best_val
        best_val = np.where(better, vals, best_val)
        best_v[better] = cur[better]

    for _ in range(probe.T):
        v_t = Tensor(v, requires_grad=True)
        hv = margin.hvp_graph("x", v_t)
        _record(_row_qnorms(hv.data, 2.0), v)
        norms = row_l2_norm(hv.reshape((b, d)))
        gv = grad(norms.sum(), v_t).data
        stepped = v + probe.o * gv
        renormed, ok = _renorm_rows(stepped, probe.p)
        # a zero post-step row cannot be renormalized; hold position
        v = np.where(ok.reshape((-1,) + (1,) * (v.ndim - 1)), renormed, v)
        if trace is not None:
            trace("step", v.copy())
    _record(_row_qnorms(margin.hvp("x", v).data, 2.0), v)
    if trace is not None:
        trace("final", best_v.copy())
    return best_val, best_v, best_val <= 0.0, v


def estimate_opnorm(margin, x=None, probe=None, rng=None, n_starts=1, include_hg=False):
    """Best ||H v||_q over ascent runs from ``n_starts`` random unit starts
    (plus the normalized-gradient start when ``include_hg``).

    Restarts run in parallel by replicating the bound input row; the
    original binding is restored before returning. The reported value is
    the best iterate over all runs, so it is monotone in both T and the
    number of starts.
    """
    probe = probe or OpNormProbe()
    rng = rng if rng is not None else np.random.default_rng()
    bound = _single_row(margin, x, "estimate_opnorm").copy()

    starts = [None] * int(n_starts)
    if probe.v0 is not None:
        starts[0] = _as_rows(probe.v0, margin.leaf_shapes["x"], 1)[0]
    if include_hg:
        d = hg_direction(margin, p=probe.p)
        if d is not None:
            starts.append(d[0])
    if not starts:
        raise GraphError("estimate_opnorm needs at least one start")

    sample_shape = bound.shape[1:]
    v0 = np.empty((len(starts),) + sample_shape)
    for i, s in enumerate(starts):
        v0[i] = rng.standard_normal(sample_shape) if s is None else s

    try:
        margin.bind(x=np.repeat(bound, len(starts), axis=0))
        vals, vecs, stuck, last = _ascent_rows(margin, v0, probe)
    finally:
        margin.bind(x=bound)

    k = int(np.argmax(vals))
    return OpNormEstimate(
        value=float(max(vals[k], 0.0)),
        v_star=vecs[k],
        iterations_used=probe.T * len(starts),
        degenerate=bool(np.all(stuck)),
        start_values=np.maximum(vals, 0.0),
        v_last=last[k],
    )


def estimate_opnorm_rows(margin, v0=None, probe=None, rng=None, trace=None):
    """Per-row operator-norm ascent over an already-bound batched margin.

    One independent probe per row (single start each; the training loop's
    regime). Returns an OpNormEstimate with per-row ``value`` and
    ``v_star`` arrays.
    """
    probe = probe or OpNormProbe()
    want = _leaf_want(margin)
    bound = margin.binding("x")
    b = bound.shape[0]
    if v0 is None:
        rng = rng if rng is not None else np.random.default_rng()
        v0 = rng.standard_normal(bound.shape)
    else:
        v0 = _as_rows(v0, want, b)
    vals, vecs, stuck, last = _ascent_rows(margin, v0, probe, trace=trace)
    return OpNormEstimate(
        value=np.maximum(vals, 0.0),
        v_star=vecs,
        iterations_used=probe.T,
        degenerate=bool(np.all(stuck)),
        v_last=last,
    )
