"""Robustness lower bounds from margins, gradients, and curvature.

For the predicted class t and each other class j, the margin
f = f_t - f_j is positive at x, and no perturbation smaller than

    max_{R>0} min{ R, f(x) / (||grad f(x)||_q + (R/2) K_R) }

can flip t to j, where K_R bounds the margin's Hessian operator norm
over the radius-R ball. The inner max has a closed form; the multiclass
bound is the min over j. Dropping the curvature term (K=0) gives the
first-order bound f / ||grad f||_q.

K_R handling is what the soundness flag records: for constant-Hessian
models the operator norm is computed exactly from the explicit Hessian
("exact"); otherwise it is estimated by ascent at the point itself or by
the max over sampled ball points iterated to a consistent radius, both
of which can under-estimate the true maximum ("heuristic").

Everything here is fixed to l2 geometry (p = q = 2).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .graph import HESSIAN_ORACLE_LIMIT
from .opnorm import OpNormProbe, estimate_opnorm, estimate_opnorm_rows
from .tensor import GraphError

__all__ = [
    "Certificate",
    "ClassTerm",
    "optimal_R",
    "second_order_certificate",
    "first_order_certificate",
    "certificate_to_json",
]

UNBOUNDED = math.inf


def optimal_R(f_val, g, K):
    """Maximize min{R, f/(g + R*K/2)} over R > 0; returns (R_star, bound).

    With curvature the two branches intersect at the positive root of
    (K/2) R^2 + g R - f = 0, where the min is largest. K = 0 leaves f/g
    (the linear case), and g = K = 0 means no finite perturbation can
    flip a constant-positive margin: the bound is the inf sentinel.
    A nonpositive margin returns (0, 0): the point is already on or past
    the boundary and the theorem gives nothing.
    """
    if f_val <= 0.0:
        return 0.0, 0.0
    if K < 0 or g < 0:
        raise GraphError("gradient norm and curvature must be nonnegative")
    if K == 0.0:
        if g == 0.0:
            return UNBOUNDED, UNBOUNDED
        r = f_val / g
        return r, r
    r = (-g + math.sqrt(g * g + 2.0 * K * f_val)) / K
    return r, r


@dataclass
class ClassTerm:
    """Components of the bound against one competitor class."""

    j: int
    f_val: float
    grad_norm: float
    K_est: float
    R_star: float
    bound: float


@dataclass
class Certificate:
    sample_id: int | None
    t: int
    terms: list[ClassTerm]
    bound: float
    mode: str
    soundness: str
    order: int
    note: str = ""


def _sample_shape(model):
    return tuple(model.input_shape)


def _exact_margin_opnorm(model, margin, t, j):
    """Spectral norm of a constant margin Hessian, exactly."""
    if hasattr(model, "margin_hessian"):
        h = model.margin_hessian(t, j)
    else:
        h = margin.explicit_hessian("x", limit=HESSIAN_ORACLE_LIMIT)
    eig = np.linalg.eigvalsh(h)
    return float(np.max(np.abs(eig))) if eig.size else 0.0


def _unit_ball_samples(rng, m, shape):
    d = int(np.prod(shape))
    raw = rng.standard_normal((m,) + shape)
    norms = np.sqrt(np.sum(raw.reshape(m, -1) ** 2, axis=1))
    radii = rng.uniform(size=m) ** (1.0 / max(d, 1))
    scale = radii / np.where(norms > 0, norms, 1.0)
    return raw * scale.reshape((m,) + (1,) * len(shape))


def _grad_norm_at(margin):
    g = margin.gradient("x").data
    return float(np.sqrt(np.sum(g * g)))


def _ball_max_opnorm(model, x, t, j, radius, unit_samples, probe, rng):
    """Max ascent estimate over x itself plus sampled ball points."""
    pts = np.concatenate([x[None], x[None] + radius * unit_samples], axis=0)
    m = pts.shape[0]
    bg = model.margin_batch_graph(pts, np.full(m, t), np.full(m, j))
    est = estimate_opnorm_rows(bg, probe=probe, rng=rng)
    return float(np.max(est.value))


def _ball_max_grad_norm(model, x, t, j, radius, unit_samples):
    pts = np.concatenate([x[None], x[None] + radius * unit_samples], axis=0)
    m = pts.shape[0]
    bg = model.margin_batch_graph(pts, np.full(m, t), np.full(m, j))
    g = bg.gradient("x").data.reshape(m, -1)
    return float(np.max(np.sqrt(np.sum(g * g, axis=1))))


def _prediction_and_order(model, x, label):
    logits = model.score(x)
    t = int(np.argmax(logits))
    if label is not None and t != int(label):
        return t, None  # misclassified: certificate collapses to 0
    order = np.argsort(logits)[::-1]
    return t, [int(j) for j in order if j != t]


def _misclassified(sample_id, t, mode, order):
    return Certificate(
        sample_id=sample_id,
        t=t,
        terms=[],
        bound=0.0,
        mode=mode,
        soundness="exact",
        order=order,
        note="prediction differs from label; counted non-robust",
    )


def second_order_certificate(
    model,
    x,
    mode="point",
    M=200,
    probe=None,
    seed=0,
    label=None,
    sample_id=None,
    fixed_point_rounds=10,
):
    """Curvature-aware bound (min over competitor classes).

    point mode estimates K at x only; sampled-ball mode takes the max
    over M uniform ball samples and iterates the radius to a fixed point
    (at most ``fixed_point_rounds`` rounds, 1e-6 tolerance). Both are
    labeled heuristic unless the model has constant Hessians, where K is
    computed exactly and radius dependence vanishes.
    """
    if mode not in ("point", "sampled-ball"):
        raise GraphError(f"mode must be 'point' or 'sampled-ball', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    t, competitors = _prediction_and_order(model, x, label)
    if competitors is None:
        return _misclassified(sample_id, t, mode, order=2)

    exact = bool(getattr(model, "constant_hessian", False))
    probe = probe or OpNormProbe(T=200)
    rng = np.random.default_rng(seed)
    unit_samples = (
        _unit_ball_samples(rng, M, _sample_shape(model))
        if mode == "sampled-ball" and not exact
        else None
    )

    terms = []
    for j in competitors:
        margin = model.margin_graph(x, t, j)
        f_val = float(margin.output.data)
        gnorm = _grad_norm_at(margin)
        if exact:
            k = _exact_margin_opnorm(model, margin, t, j)
            r_star, bound = optimal_R(f_val, gnorm, k)
        else:
            est = estimate_opnorm(margin, probe=probe, rng=rng, n_starts=5, include_hg=True)
            k = est.value
            r_star, bound = optimal_R(f_val, gnorm, k)
            if mode == "sampled-ball" and math.isfinite(bound) and bound > 0:
                for _ in range(fixed_point_rounds):
                    k_ball = max(
                        k,
                        _ball_max_opnorm(
                            model, x, t, j, r_star, unit_samples, probe, rng
                        ),
                    )
                    new_r, new_bound = optimal_R(f_val, gnorm, k_ball)
                    moved = abs(new_r - r_star)
                    k, r_star, bound = k_ball, new_r, new_bound
                    if moved < 1e-6:
                        break
        terms.append(
            ClassTerm(j=j, f_val=f_val, grad_norm=gnorm, K_est=k, R_star=r_star, bound=bound)
        )
    final = min(term.bound for term in terms)
    return Certificate(
        sample_id=sample_id,
        t=t,
        terms=terms,
        bound=final,
        mode=mode,
        soundness="exact" if exact else "heuristic",
        order=2,
    )


def first_order_certificate(
    model, x, mode="point", M=200, seed=0, label=None, sample_id=None
):
    """Gradient-only bound f / max_ball ||grad f||.

    point mode uses the gradient at x alone; a vanishing gradient there
    makes the bound unbounded-by-first-order (the sentinel), which is
    exactly the failure the curvature term repairs. sampled-ball mode
    bisects the radius to the fixed point R = f / G(R) with G estimated
    from M ball samples.
    """
    if mode not in ("point", "sampled-ball"):
        raise GraphError(f"mode must be 'point' or 'sampled-ball', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    t, competitors = _prediction_and_order(model, x, label)
    if competitors is None:
        return _misclassified(sample_id, t, mode, order=1)

    # exact only when every margin is affine (zero Hessian everywhere)
    exact = bool(getattr(model, "constant_hessian", False)) and all(
        not np.any(model.margin_hessian(t, j)) for j in competitors
    ) if hasattr(model, "margin_hessian") else False

    rng = np.random.default_rng(seed)
    unit_samples = (
        _unit_ball_samples(rng, M, _sample_shape(model)) if mode == "sampled-ball" else None
    )

    note = ""
    terms = []
    for j in competitors:
        margin = model.margin_graph(x, t, j)
        f_val = float(margin.output.data)
        g0 = _grad_norm_at(margin)
        if mode == "point":
            r_star, bound = optimal_R(f_val, g0, 0.0)
            gmax = g0
            if bound is UNBOUNDED or bound == UNBOUNDED:
                note = "zero gradient at x: unbounded by first order"
        else:
            gmax, r_star, bound = _first_order_ball(
                model, x, t, j, f_val, g0, unit_samples
            )
        terms.append(
            ClassTerm(j=j, f_val=f_val, grad_norm=gmax, K_est=0.0, R_star=r_star, bound=bound)
        )
    final = min(term.bound for term in terms)
    return Certificate(
        sample_id=sample_id,
        t=t,
        terms=terms,
        bound=final,
        mode=mode,
        soundness="exact" if exact else "heuristic",
        order=1,
        note=note,
    )


def _first_order_ball(model, x, t, j, f_val, g0, unit_samples, tol=1e-6, rounds=60):
    """Bisection for R with R * G(R) = f, G(R) = sampled ball gradient max."""
    if f_val <= 0:
        return g0, 0.0, 0.0

    def gmax(radius):
        return max(g0, _ball_max_grad_norm(model, x, t, j, radius, unit_samples))

    lo, hi = 0.0, max(f_val / g0 if g0 > 0 else 1.0, 1e-3)
    ghi = gmax(hi)
    grow = 0
    while hi * ghi < f_val and grow < 60:
        if ghi == 0.0 and g0 == 0.0:
            hi *= 4.0
        else:
            hi *= 2.0
        ghi = gmax(hi)
        grow += 1
    if hi * ghi < f_val:
        return ghi, UNBOUNDED, UNBOUNDED  # gradient vanishes on every probe
    for _ in range(rounds):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if mid * gmax(mid) < f_val:
            lo = mid
        else:
            hi = mid
    g_at = gmax(lo) if lo > 0 else g0
    return g_at, lo, lo


def certificate_to_json(cert):
    """One JSON object (a JSONL line) with inf rendered as 'unbounded'."""

    def _num(v):
        return "unbounded" if math.isinf(v) else v

    return json.dumps(
        {
            "sample_id": cert.sample_id,
            "predicted": cert.t,
            "bound": _num(cert.bound),
            "mode": cert.mode,
            "soundness": cert.soundness,
            "order": cert.order,
            "note": cert.note,
            "terms": [
                {
                    "j": term.j,
                    "f": term.f_val,
                    "grad_norm": term.grad_norm,
                    "K": term.K_est,
                    "R_star": _num(term.R_star),
                    "bound": _num(term.bound),
                }
                for term in cert.terms
            ],
        },
        sort_keys=True,
    )
