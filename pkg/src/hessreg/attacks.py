"""Projected gradient attacks and worst-case adversarial accuracy.

The attack maximizes either cross-entropy or the margin objective
max_{j != y} f_j(x + delta) - f_y(x + delta) over the l_p ball of radius
epsilon (p in {2, inf}), by normalized-gradient ascent: the l2 step uses
the globally l2-normalized gradient, the l_inf step uses the sign. After
every step the perturbation is projected back into the ball (radial
rescale for l2, coordinate clip for l_inf) and, when the data declares a
feature range, x + delta is clipped into it (which never grows either
norm, since x itself is in range).

Every (restart, sample) pair draws its start point from its own seeded
stream, keyed by the restart number and the sample's dataset index, so
outcomes depend on neither batch boundaries nor whether restarts run
one at a time or stacked as extra rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import cross_entropy
from .tensor import GraphError, Tensor, grad

__all__ = [
    "AttackSpec",
    "AttackOutcome",
    "pgd_attack",
    "pgd_attack_batch",
    "adversarial_accuracy",
    "find_minimal_eps",
]


@dataclass
class AttackSpec:
    """Ball radius, norm, schedule, and objective of one PGD attack."""

    eps: float
    p: float = np.inf
    iterations: int = 50
    restarts: int = 10
    alpha: float | None = None
    objective: str = "ce"
    clamp: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.eps > 0:
            raise GraphError(f"attack radius must be positive, got {self.eps}")
        self.p = float(self.p)
        if self.p not in (2.0, np.inf):
            raise GraphError(f"attack norm must be 2 or inf, got {self.p}")
        if self.iterations < 1 or self.restarts < 1:
            raise GraphError("need at least one iteration and one restart")
        if self.alpha is None:
            self.alpha = 2.5 * self.eps / self.iterations
        if not self.alpha > 0:
            raise GraphError(f"step size must be positive, got {self.alpha}")
        self.objective = self.objective.lower()
        if self.objective not in ("ce", "cw"):
            raise GraphError(f"objective must be 'ce' or 'cw', got {self.objective!r}")


@dataclass
class AttackOutcome:
    success: bool
    delta: np.ndarray
    objective_value: float
    restart: int
    adv_class: int


# ----------------------------------------------------------------------
# ball geometry


def _row_norms(d, p):
    flat = d.reshape(d.shape[0], -1)
    if p == 2.0:
        return np.sqrt(np.sum(flat * flat, axis=1))
    return np.max(np.abs(flat), axis=1) if flat.shape[1] else np.zeros(d.shape[0])


def _project_ball(delta, eps, p):
    if p == np.inf:
        return np.clip(delta, -eps, eps)
    norms = _row_norms(delta, 2.0)
    scale = np.where(norms > eps, eps / np.where(norms > 0, norms, 1.0), 1.0)
    return delta * scale.reshape((-1,) + (1,) * (delta.ndim - 1))


def _step_direction(g, p):
    if p == np.inf:
        return np.sign(g)
    norms = _row_norms(g, 2.0)
    safe = np.where(norms > 0, norms, 1.0)
    return g / safe.reshape((-1,) + (1,) * (g.ndim - 1))


def _uniform_ball(rng, shape, eps, p):
    """One start point per row, uniform over the radius-eps ball."""
    if p == np.inf:
        return rng.uniform(-eps, eps, size=shape)
    b = shape[0]
    d = int(np.prod(shape[1:]))
    raw = rng.standard_normal(size=shape)
    norms = _row_norms(raw, 2.0)
    radii = eps * rng.uniform(size=b) ** (1.0 / max(d, 1))
    scale = radii / np.where(norms > 0, norms, 1.0)
    return raw * scale.reshape((-1,) + (1,) * (len(shape) - 1))


def _start_points(seed, restart, row_ids, sample_shape, eps, p):
    """Start perturbations for the given dataset rows, one independent
    stream per (restart, row) pair."""
    out = np.empty((len(row_ids),) + sample_shape)
    for k, i in enumerate(row_ids):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(restart, int(i)))
        )
        out[k] = _uniform_ball(rng, (1,) + sample_shape, eps, p)[0]
    return out


def _apply_constraints(delta, x, spec):
    delta = _project_ball(delta, spec.eps, spec.p)
    if spec.clamp is not None:
        lo, hi = spec.clamp
        delta = np.clip(x + delta, lo, hi) - x
    return delta


# ----------------------------------------------------------------------
# objectives (values from logits; gradients via a logits mask)


def _objective_values(logits, y, objective):
    b, k = logits.shape
    rows = np.arange(b)
    if objective == "ce":
        m = logits.max(axis=1)
        return m + np.log(np.sum(np.exp(logits - m[:, None]), axis=1)) - logits[rows, y]
    others = logits.copy()
    others[rows, y] = -np.inf
    return others.max(axis=1) - logits[rows, y]


def _cw_mask(logits, y):
    """Mask m with (logits*m).sum() == sum of attained margins; its
    gradient is the chosen subgradient of the row-wise max."""
    b, k = logits.shape
    rows = np.arange(b)
    others = logits.copy()
    others[rows, y] = -np.inf
    jstar = others.argmax(axis=1)
    mask = np.zeros((b, k))
    mask[rows, jstar] = 1.0
    mask[rows, y] -= 1.0
    return mask


def _attack_rows(model, x, y, spec, delta0):
    """Run the PGD loop on a stack of rows. Returns per-row success,
    best delta, and best objective value (successes preferred, then
    higher objective)."""
    b = x.shape[0]
    theta_t = Tensor(model.theta)
    x_t = Tensor(x)
    y = np.asarray(y, dtype=int)

    delta = _apply_constraints(delta0.copy(), x, spec)
    best_obj = np.full(b, -np.inf)
    best_delta = delta.copy()
    best_success = np.zeros(b, dtype=bool)

    def _consider(vals, preds, cur):
        nonlocal best_obj, best_delta, best_success
        succ = preds != y
        better = (succ & ~best_success) | ((succ == best_success) & (vals > best_obj))
        best_obj = np.where(better, vals, best_obj)
        best_success = best_success | succ
        best_delta[better] = cur[better]

    for _ in range(spec.iterations):
        d_t = Tensor(delta, requires_grad=True)
        logits = model.apply(theta_t, x_t + d_t)
        vals = logits.data
        _consider(_objective_values(vals, y, spec.objective), vals.argmax(axis=1), delta)
        if spec.objective == "ce":
            j = cross_entropy(logits, y).sum()
        else:
            j = (logits * Tensor(_cw_mask(vals, y))).sum()
        g = grad(j, d_t).data
        delta = _apply_constraints(delta + spec.alpha * _step_direction(g, spec.p), x, spec)

    final_logits = model.score(x + delta)
    _consider(
        _objective_values(final_logits, y, spec.objective),
        final_logits.argmax(axis=1),
        delta,
    )
    return best_success, best_delta, best_obj


def pgd_attack_batch(model, x, y, spec, return_deltas=False, row_ids=None):
    """Attack a batch; restarts are stacked as extra rows and reduced
    per sample (any success wins; ties broken by objective value).

    ``row_ids`` are the samples' dataset indices (used to key the start
    noise; defaults to 0..b-1). Returns (success, adv_class, objective,
    restart_idx) arrays, plus the chosen deltas when ``return_deltas``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    b = x.shape[0]
    r = spec.restarts
    if row_ids is None:
        row_ids = np.arange(b)

    succ = np.zeros((r, b), dtype=bool)
    objs = np.full((r, b), -np.inf)
    deltas = np.zeros((r,) + x.shape)
    for rest in range(r):
        d0 = _start_points(spec.seed, rest, row_ids, x.shape[1:], spec.eps, spec.p)
        s, d, o = _attack_rows(model, x, y, spec, d0)
        succ[rest], deltas[rest], objs[rest] = s, d, o

    # per sample: prefer successful restarts, then the highest objective
    rank = objs + np.where(succ, 1e18, 0.0)
    pick = rank.argmax(axis=0)
    cols = np.arange(b)
    chosen = deltas[pick, cols]
    adv_class = model.score(x + chosen).argmax(axis=1) if b else np.zeros(0, int)
    out = (succ.any(axis=0), adv_class, objs[pick, cols], pick)
    return out + (chosen,) if return_deltas else out


def pgd_attack(model, x, y, spec):
    """Attack one sample; see pgd_attack_batch for the restart policy."""
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == tuple(model.input_shape)
    if not single:
        raise GraphError("pgd_attack takes one sample; use pgd_attack_batch")
    success, adv, obj, restart, delta = pgd_attack_batch(
        model, x[None], np.asarray([y], dtype=int), spec, return_deltas=True
    )
    return AttackOutcome(
        success=bool(success[0]),
        delta=delta[0],
        objective_value=float(obj[0]),
        restart=int(restart[0]),
        adv_class=int(adv[0]),
    )


# ----------------------------------------------------------------------
# accuracy curves


def adversarial_accuracy(
    model,
    dataset,
    eps_grid,
    p=2.0,
    iterations=50,
    restarts=10,
    seed=0,
    batch_size=128,
):
    """Accuracy under PGD-CE, PGD-CW, their curve minimum (`paper_worst`),
    and the per-sample conjunction (`strict_worst`) for each epsilon.

    Misclassified clean samples count as non-robust everywhere. Rows come
    back as dicts matching the CSV schema: epsilon, attack, accuracy,
    n_samples.
    """
    eps_grid = [float(e) for e in eps_grid]
    if not eps_grid:
        raise GraphError("need at least one epsilon")
    x, y = dataset.X, dataset.y
    n = len(dataset)
    clean_ok = model.score(x).argmax(axis=1) == y

    rows = []
    for eps in eps_grid:
        robust = {}
        for objective in ("ce", "cw"):
            spec = AttackSpec(
                eps=eps,
                p=p,
                iterations=iterations,
                restarts=restarts,
                objective=objective,
                clamp=dataset.clamp,
                seed=seed,
            )
            failed = np.zeros(n, dtype=bool)
            for lo in range(0, n, batch_size):
                hi = min(lo + batch_size, n)
                succ, _, _, _ = pgd_attack_batch(
                    model, x[lo:hi], y[lo:hi], spec, row_ids=np.arange(lo, hi)
                )
                failed[lo:hi] = ~succ
            robust[objective] = clean_ok & failed
        acc_ce = float(np.mean(robust["ce"]))
        acc_cw = float(np.mean(robust["cw"]))
        strict = float(np.mean(robust["ce"] & robust["cw"]))
        for attack, acc in (
            ("ce", acc_ce),
            ("cw", acc_cw),
            ("paper_worst", min(acc_ce, acc_cw)),
            ("strict_worst", strict),
        ):
            rows.append(
                {"epsilon": eps, "attack": attack, "accuracy": acc, "n_samples": n}
            )
    return rows


def find_minimal_eps(model, x, y, spec_template, lo, hi, tol=1e-3, max_rounds=60):
    """Bisect the smallest radius at which the attack succeeds.

    ``lo`` must fail and ``hi`` must succeed (both are verified). The
    step size rescales with eps through the AttackSpec default.
    """

    def _succeeds(eps):
        spec = AttackSpec(
            eps=eps,
            p=spec_template.p,
            iterations=spec_template.iterations,
            restarts=spec_template.restarts,
            objective=spec_template.objective,
            clamp=spec_template.clamp,
            seed=spec_template.seed,
        )
        return pgd_attack(model, x, y, spec).success

    if _succeeds(lo):
        return lo
    if not _succeeds(hi):
        raise GraphError(f"attack never succeeds up to eps={hi}")
    for _ in range(max_rounds):
        if hi - lo <= tol * max(1.0, lo):
            break
        mid = 0.5 * (lo + hi)
        if _succeeds(mid):
            hi = mid
        else:
            lo = mid
    return hi
