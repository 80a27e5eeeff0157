"""Training objectives: cross-entropy plus margin-derivative regularizers.

The regularized loss for a labeled batch is

    sum_i [ ce(x_i, y_i)
            + lam1 * sum_{j != y_i} ( ||grad_x f^(j)(x_i)||_q
                                      + lam2 * ||H_{f^(j)}(x_i) v_ij||_q ) ]

where f^(j) = f_{y_i} - f_j is the margin against class j and v_ij are
unit directions supplied by the caller. lam2 = 0 drops the curvature
terms (gradient-norm regularization only); lam1 = 0 leaves plain
cross-entropy. The v_ij enter as constants: the parameter gradient is
taken with the directions frozen, so no gradient flows into how they
were found.

Everything is assembled as one differentiable graph over a ``theta``
leaf (and an ``x`` leaf), so one backward pass yields the full parameter
gradient including the third-order chains through the Hessian terms.
Margins are batched per class: the summed margin over rows has
independent per-row derivatives, so K gradient passes cover all (i, j)
pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import DiffGraph
from .tensor import GraphError, Tensor, grad, log_sum_exp, row_l2_norm

__all__ = [
    "LossConfig",
    "cross_entropy",
    "cross_lipschitz_term",
    "cross_holder_graph",
    "cross_holder_loss",
    "margin_masks",
]


@dataclass
class LossConfig:
    """Regularization weights and the probe defaults the trainer uses to
    find the curvature directions."""

    lam1: float = 0.0
    lam2: float = 0.0
    q: float = 2.0
    probe_T: int = 10
    probe_o: float = 0.1

    def __post_init__(self):
        if self.lam1 < 0 or self.lam2 < 0:
            raise GraphError("regularization weights must be nonnegative")
        self.q = float(self.q)
        if self.q not in (1.0, 2.0):
            raise GraphError(f"differentiable q-norms support q in {{1, 2}}, got {self.q}")
        if self.lam2 > 0 and self.q != 2.0:
            raise GraphError("curvature terms need q = 2 (ascent is q=2 only)")

    @property
    def p(self):
        """Conjugate exponent for the direction constraint."""
        return 2.0 if self.q == 2.0 else np.inf


def _check_labels(y, k):
    y = np.asarray(y, dtype=int)
    if y.ndim != 1:
        raise ValueError(f"labels must be a 1-D array, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    return y


def cross_entropy(logits, y):
    """Stable cross-entropy: log-sum-exp(logits) minus the true logit.

    A (K,) input with an int label gives a scalar Tensor; a (B, K) batch
    with a label vector gives the per-row (B,) Tensor.
    """
    t = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
    if t.ndim == 1:
        y = int(y)
        if not 0 <= y < t.shape[0]:
            raise ValueError(f"label {y} out of range for {t.shape[0]} classes")
        return log_sum_exp(t) - t[y]
    if t.ndim != 2:
        raise ValueError(f"cross_entropy expects (K,) or (B, K) logits, got {t.shape}")
    b, k = t.shape
    y = _check_labels(y, k)
    if y.size != b:
        raise ValueError(f"{b} rows but {y.size} labels")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), y] = 1.0
    return log_sum_exp(t, axis=1) - (t * Tensor(onehot)).sum(axis=1)


def margin_masks(y, k):
    """For each class j, a (B, K) logit mask whose rows encode the margin
    f_{y_i} - f_j (zero rows where y_i == j) and the (B,) keep vector
    selecting rows where that margin exists."""
    y = np.asarray(y, dtype=int)
    b = y.size
    rows = np.arange(b)
    out = []
    for j in range(k):
        keep = (y != j).astype(np.float64)
        mask = np.zeros((b, k))
        mask[rows, y] += keep
        mask[rows, j] -= keep
        out.append((mask, keep))
    return out


def _row_qnorm_expr(flat, q):
    """Differentiable per-row q-norm of a (B, d) Tensor."""
    if q == 2.0:
        return row_l2_norm(flat)
    if q == 1.0:
        return flat.abs().sum(axis=1)
    raise GraphError(f"no differentiable row norm for q={q}")


def _coerce_v_star(v_star, b, k, sample_shape, y, p, pair_keep=None):
    """Accept a (B, K, *sample) array or a {(i, j): vec} dict; verify every
    needed direction is present and unit p-norm."""
    want = (b, k) + sample_shape
    used = np.ones((b, k), dtype=bool)
    used[np.arange(b), y] = False
    if pair_keep is not None:
        used &= pair_keep
    if isinstance(v_star, dict):
        arr = np.zeros(want)
        for i in range(b):
            for j in range(k):
                if not used[i, j]:
                    continue
                if (i, j) not in v_star:
                    raise GraphError(f"v_star missing direction for sample {i}, class {j}")
                arr[i, j] = np.asarray(v_star[(i, j)], dtype=np.float64).reshape(sample_shape)
    else:
        arr = np.asarray(v_star, dtype=np.float64)
        if arr.shape != want:
            raise GraphError(f"v_star shape {arr.shape} does not match {want}")
    flat = arr.reshape(b, k, -1)
    norms = (
        np.sqrt(np.sum(flat * flat, axis=2)) if p == 2.0 else np.max(np.abs(flat), axis=2)
    )
    bad = used & (np.abs(norms - 1.0) > 1e-6)
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise GraphError(
            f"v_star[{i}][{j}] must be unit p-norm, got {norms[i, j]:.6g}"
        )
    return arr


def _regularizer_expr(model, logits, x_t, y, cfg, v_star_arr, pair_keep=None, aux=None):
    """Tensor expression for the lam1/lam2 terms of the batch loss; shares
    the caller's forward pass through ``logits``.

    ``pair_keep`` optionally restricts which (sample, class) margins count
    (a speed knob; default every j != y_i). When ``aux`` is a dict, the
    raw unweighted gradient-term and Hessian-term sums are stashed there
    as Tensors for metrics readout.
    """
    b = x_t.shape[0]
    grad_total = None
    hess_total = None
    for j, (mask, keep) in enumerate(margin_masks(y, model.K)):
        if pair_keep is not None:
            keep = keep * pair_keep[:, j]
            mask = mask * keep[:, None]
        if not keep.any():
            continue
        keep_t = Tensor(keep)
        margin_sum = (logits * Tensor(mask)).sum()
        gx = grad(margin_sum, x_t, create_graph=True)
        gnorm = _row_qnorm_expr(gx.reshape((b, -1)), cfg.q)
        gterm = (gnorm * keep_t).sum()
        grad_total = gterm if grad_total is None else grad_total + gterm
        if cfg.lam2 > 0:
            v_j = Tensor(v_star_arr[:, j])
            hv = grad((gx * v_j).sum(), x_t, create_graph=True)
            hnorm = row_l2_norm(hv.reshape((b, -1)))
            hterm = (hnorm * keep_t).sum()
            hess_total = hterm if hess_total is None else hess_total + hterm
    if grad_total is None:
        raise GraphError("batch has no off-label margins (K < 2?)")
    if aux is not None:
        aux["grad_term_sum"] = grad_total
        aux["hess_term_sum"] = hess_total
    total = grad_total
    if hess_total is not None:
        total = total + cfg.lam2 * hess_total
    return cfg.lam1 * total


def cross_lipschitz_term(model, x, y, q=2.0):
    """Sum over off-label classes of the input-gradient q-norms of the
    margins, summed over the batch. Accepts one sample or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == tuple(model.input_shape)
    if single:
        x = x[None]
        y = np.asarray([y], dtype=int)
    y = _check_labels(y, model.K)
    cfg = LossConfig(lam1=1.0, lam2=0.0, q=q)

    def builder(leaves):
        logits = model.apply(leaves["theta"], leaves["x"])
        return _regularizer_expr(model, logits, leaves["x"], y, cfg, None)

    g = DiffGraph(
        builder,
        {"x": (None,) + tuple(model.input_shape), "theta": (model.n_params,)},
        bindings={"x": x, "theta": model.theta},
    )
    return float(g.output.data)


def cross_holder_graph(model, x, y, cfg, v_star=None, reduction="sum", pair_keep=None, aux=None):
    """The full batch loss as a DiffGraph over leaves theta and x.

    ``v_star`` holds the frozen unit curvature directions, one per
    (sample, off-label class); required when cfg.lam2 > 0. ``reduction``
    is "sum" (the written objective) or "mean" (what an SGD step uses;
    a pure learning-rate rescale). ``pair_keep`` (bool, shape (B, K))
    restricts the regularizer to a subset of margins; ``aux`` collects
    the raw penalty sums for metrics.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape == tuple(model.input_shape):
        x = x[None]
    y = _check_labels(y, model.K)
    b = x.shape[0]
    if y.size != b:
        raise ValueError(f"{b} rows but {y.size} labels")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    scale = 1.0 / b if reduction == "mean" else 1.0
    if pair_keep is not None:
        pair_keep = np.asarray(pair_keep, dtype=bool)
        if pair_keep.shape != (b, model.K):
            raise ValueError(f"pair_keep shape {pair_keep.shape} is not {(b, model.K)}")

    v_arr = None
    if cfg.lam1 > 0 and cfg.lam2 > 0:
        if v_star is None:
            raise GraphError("cfg.lam2 > 0 needs frozen v_star directions")
        v_arr = _coerce_v_star(
            v_star, b, model.K, tuple(model.input_shape), y, cfg.p, pair_keep
        )

    def builder(leaves):
        theta_t, x_t = leaves["theta"], leaves["x"]
        logits = model.apply(theta_t, x_t)
        total = cross_entropy(logits, y).sum()
        if cfg.lam1 > 0:
            total = total + _regularizer_expr(
                model, logits, x_t, y, cfg, v_arr, pair_keep, aux
            )
        return total * scale

    return DiffGraph(
        builder,
        {"x": (None,) + tuple(model.input_shape), "theta": (model.n_params,)},
        bindings={"x": x, "theta": model.theta},
    )


def cross_holder_loss(model, x, y, cfg, v_star=None):
    """Value of the batch objective (the summed form)."""
    return float(cross_holder_graph(model, x, y, cfg, v_star).output.data)
