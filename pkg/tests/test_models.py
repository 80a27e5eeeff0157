"""Model shapes, serialization round trips, and margin-graph gradients
against finite differences."""

import os

import numpy as np
import pytest

from hessreg.models import (
    LayerSpec,
    QuadraticModel,
    ScoringModel,
    build_conv_net,
    build_mlp,
    linear_binary_model,
    load_model,
)


def test_conv_net_shapes():
    rng = np.random.default_rng(0)
    m = build_conv_net((28, 28, 1), 10, seed=1)
    assert m.score(rng.normal(size=(2, 28, 28, 1))).shape == (2, 10)
    m8 = build_conv_net((8, 8), 10, seed=1)
    assert m8.input_shape == (8, 8, 1)
    assert m8.score(rng.normal(size=(8, 8, 1))).shape == (10,)


def test_conv_net_weighted_layer_count():
    # four conv blocks, two dense blocks, then the logits layer
    m = build_conv_net((8, 8, 1), 10)
    assert len(m.weighted_layers) == 7


def test_save_load_round_trip_is_byte_identical(tmp_path):
    m = build_conv_net((8, 8, 1), 10, seed=1)
    p1, p2 = os.path.join(tmp_path, "a.hnet"), os.path.join(tmp_path, "b.hnet")
    m.save(p1)
    m2 = load_model(p1)
    m2.save(p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()
    assert np.array_equal(m2.theta, m.theta)
    x = np.random.default_rng(2).normal(size=(8, 8, 1))
    assert np.array_equal(m2.score(x), m.score(x))


def test_margin_graph_value_and_input_gradient_fd():
    rng = np.random.default_rng(0)
    mlp = build_mlp(6, 4, hidden=(16, 16), seed=3)
    x0 = rng.normal(size=(6,))
    g = mlp.margin_graph(x0, 2, 0)
    s = mlp.score(x0)
    assert abs(g.forward() - (s[2] - s[0])) < 1e-12

    gx = g.gradient("x").data.ravel()
    eps = 1e-6
    fd = np.zeros(6)
    for i in range(6):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += eps
        xm[i] -= eps
        sp, sm = mlp.score(xp), mlp.score(xm)
        fd[i] = ((sp[2] - sp[0]) - (sm[2] - sm[0])) / (2 * eps)
    assert np.max(np.abs(gx - fd)) / max(1.0, np.max(np.abs(fd))) < 1e-7


def test_conv_theta_gradient_fd():
    rng = np.random.default_rng(0)
    small = ScoringModel(
        [LayerSpec("conv2d", out_channels=2, stride=2), LayerSpec("swish"),
         LayerSpec("flatten"), LayerSpec("dense", units=3)],
        (5, 5, 1), 3, seed=7)
    xs = rng.normal(size=(5, 5, 1))
    gth = small.margin_graph(xs, 0, 1).gradient("theta").data
    eps = 1e-6
    for i in rng.choice(small.n_params, size=12, replace=False):
        tp, tm = small.theta.copy(), small.theta.copy()
        tp[i] += eps
        tm[i] -= eps
        sp = ScoringModel(small.layers, small.input_shape, 3, theta=tp).score(xs)
        sm = ScoringModel(small.layers, small.input_shape, 3, theta=tm).score(xs)
        fd = ((sp[0] - sp[1]) - (sm[0] - sm[1])) / (2 * eps)
        assert abs(fd - gth[i]) <= 1e-6 * max(1.0, abs(fd))


def test_quadratic_margin_hessian_exact():
    rng = np.random.default_rng(0)
    d = 5
    Araw = rng.normal(size=(3, d, d))
    A = (Araw + Araw.transpose(0, 2, 1)) / 2
    qm = QuadraticModel(W=rng.normal(size=(3, d)), c=rng.normal(size=3), A=A)
    H = qm.margin_graph(rng.normal(size=d), 1, 2).explicit_hessian("x")
    assert np.allclose(H, qm.margin_hessian(1, 2), atol=1e-10)


def test_batched_margin_rows_are_independent():
    rng = np.random.default_rng(0)
    d = 5
    qm = QuadraticModel(W=rng.normal(size=(3, d)), c=rng.normal(size=3))
    xb = rng.normal(size=(4, d))
    ti, tj = [0, 1, 2, 0], [1, 2, 0, 2]
    gb = qm.margin_batch_graph(xb, ti, tj).gradient("x").data
    for r in range(4):
        g1 = qm.margin_graph(xb[r], ti[r], tj[r]).gradient("x").data
        assert np.allclose(gb[r], g1[0], atol=1e-12)


def test_linear_binary_margin():
    lin = linear_binary_model(np.array([1.0, -2.0]), 0.5)
    s = lin.score([1.0, 1.0])
    assert abs((s[0] - s[1]) - (-0.5)) < 1e-15


def test_margin_graph_rejects_equal_classes():
    mlp = build_mlp(3, 3, hidden=(4,), seed=0)
    with pytest.raises(ValueError):
        mlp.margin_graph(np.zeros(3), 1, 1)


def test_theta_manifest_partitions_parameters():
    m = build_mlp(6, 4, hidden=(16, 16), seed=0)
    covered = sorted(
        (off, off + int(np.prod(shape))) for _, off, shape in m.manifest
    )
    assert covered[0][0] == 0 and covered[-1][1] == m.n_params
    for (_, end), (start, _) in zip(covered, covered[1:]):
        assert end == start
