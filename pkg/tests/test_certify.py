"""Certificates against oracles: the closed-form radius vs grid search,
exact distances on linear and single-curvature models, and PGD soundness
on constant-Hessian instances."""

import json
import math

import numpy as np
import pytest

from hessreg.attacks import AttackSpec, pgd_attack
from hessreg.certify import (
    Certificate,
    certificate_to_json,
    first_order_certificate,
    optimal_R,
    second_order_certificate,
)
from hessreg.models import QuadraticModel, build_mlp, linear_binary_model
from hessreg.tensor import GraphError


def grid_best(f, g, K, step=1e-6):
    """Two-stage grid over R: coarse pass, then step-fine around the peak."""
    hi = 3.0 * optimal_R(f, g, K)[0] + 1.0

    def value(R):
        return np.minimum(R, f / (g + R * K / 2.0))

    coarse = np.linspace(step, hi, 4000)
    c = coarse[np.argmax(value(coarse))]
    lo = max(step, c - (coarse[1] - coarse[0]))
    fine = np.arange(lo, c + (coarse[1] - coarse[0]), step)
    vals = value(fine)
    return fine[np.argmax(vals)], float(np.max(vals))


def test_optimal_R_matches_grid_search():
    rng = np.random.default_rng(0)
    for _ in range(200):
        f = float(rng.uniform(0.05, 5.0))
        g = float(rng.uniform(0.0, 4.0))
        K = float(rng.uniform(0.01, 6.0))
        r, b = optimal_R(f, g, K)
        gr, gb = grid_best(f, g, K)
        assert abs(b - gb) <= 2e-6, (f, g, K)
        assert abs(r - gr) <= 2e-6


def test_optimal_R_edge_cases():
    # no curvature: the first-order radius f/g
    r, b = optimal_R(2.0, 4.0, 0.0)
    assert r == b == 0.5
    # constant positive margin: nothing can flip it
    r, b = optimal_R(1.0, 0.0, 0.0)
    assert math.isinf(r) and math.isinf(b)
    # on or past the boundary: nothing to certify
    assert optimal_R(0.0, 1.0, 1.0) == (0.0, 0.0)
    assert optimal_R(-3.0, 1.0, 1.0) == (0.0, 0.0)
    with pytest.raises(GraphError):
        optimal_R(1.0, -0.1, 0.0)


def test_linear_model_certified_to_exact_distance():
    rng = np.random.default_rng(1)
    for _ in range(20):
        w = rng.normal(size=3)
        b = float(rng.normal())
        lin = linear_binary_model(w, b)
        x = rng.normal(size=3)
        margin = float(lin.score(x)[0] - lin.score(x)[1])
        t = int(np.argmax(lin.score(x)))
        exact = abs(margin) / np.linalg.norm(w)
        for cert in (
            second_order_certificate(lin, x, mode="point"),
            second_order_certificate(lin, x, mode="sampled-ball", M=50, seed=2),
            first_order_certificate(lin, x, mode="point"),
        ):
            assert cert.t == t
            assert cert.soundness == "exact"
            assert abs(cert.bound - exact) < 1e-6


def test_pure_curvature_model_certifies_sqrt2():
    # margin 1 - x1^2/2: boundary at |x1| = sqrt(2), gradient 0 at origin
    qm = QuadraticModel(
        W=np.zeros((2, 2)), c=np.array([1.0, 0.0]),
        A=np.stack([np.diag([-1.0, 0.0]), np.zeros((2, 2))]),
    )
    x0 = np.zeros(2)
    cert = second_order_certificate(qm, x0, mode="point")
    assert abs(cert.bound - math.sqrt(2.0)) < 1e-9

    # brute force over the same model: smallest perturbation flipping the sign
    r = np.linspace(0, 2, 200001)
    margins = 1 - 0.5 * r**2
    brute = r[np.argmax(margins <= 0)]
    assert abs(cert.bound - brute) < 1e-4

    # first order sees zero gradient and gives nothing at the point
    f1 = first_order_certificate(qm, x0, mode="point")
    assert math.isinf(f1.bound)


def test_misclassified_sample_gets_zero_bound():
    lin = linear_binary_model(np.array([1.0, 0.0]), 0.0)
    x = np.array([1.0, 0.0])  # predicted class 0
    cert = second_order_certificate(lin, x, label=1, sample_id=7)
    assert cert.bound == 0.0 and cert.terms == []
    assert "differs" in cert.note


def test_bound_is_min_over_competitors():
    rng = np.random.default_rng(3)
    qm = QuadraticModel(W=rng.normal(size=(4, 3)), c=rng.normal(size=4))
    x = rng.normal(size=3)
    cert = second_order_certificate(qm, x, mode="point")
    assert cert.terms, "expected per-class terms"
    assert abs(cert.bound - min(t.bound for t in cert.terms)) < 1e-12


def test_constant_hessian_soundness_against_pgd():
    rng = np.random.default_rng(5)
    checked = 0
    for trial in range(50):
        d = int(rng.integers(2, 6))
        k = int(rng.integers(2, 4))
        Araw = rng.normal(size=(k, d, d)) * rng.uniform(0.1, 2.0)
        A = (Araw + Araw.transpose(0, 2, 1)) / 2
        qm = QuadraticModel(W=rng.normal(size=(k, d)), c=rng.normal(size=k), A=A)
        x = rng.normal(size=d)
        cert = second_order_certificate(qm, x, mode="point")
        if not (0 < cert.bound < 10):
            continue
        spec = AttackSpec(eps=0.999 * cert.bound, p=2.0, iterations=50,
                          restarts=10, objective="cw", seed=trial)
        out = pgd_attack(qm, x, cert.t, spec)
        assert not out.success, (trial, cert.bound)
        checked += 1
    assert checked >= 30


def test_sampled_ball_tightens_or_matches_on_growing_curvature():
    # curvature grows away from x, so the ball estimate must not exceed
    # the point estimate in radius
    mlp = build_mlp(4, 3, hidden=(10,), seed=6)
    x = np.random.default_rng(8).normal(size=4) * 0.3
    point = second_order_certificate(mlp, x, mode="point", probe=None, seed=1)
    ball = second_order_certificate(mlp, x, mode="sampled-ball", M=64, seed=1)
    assert point.soundness == "heuristic" and ball.soundness == "heuristic"
    assert ball.bound <= point.bound + 1e-9


def test_certificate_json_round_trip():
    lin = linear_binary_model(np.array([3.0, 4.0]), 0.0)
    cert = second_order_certificate(lin, np.array([1.0, 0.0]), sample_id=3)
    row = json.loads(certificate_to_json(cert))
    assert row["sample_id"] == 3
    assert row["order"] == 2
    assert isinstance(row["bound"], float)
    # the sentinel renders as a word, not as Infinity
    unb = Certificate(sample_id=0, t=0, terms=[], bound=math.inf,
                      mode="point", soundness="exact", order=1)
    assert json.loads(certificate_to_json(unb))["bound"] == "unbounded"
