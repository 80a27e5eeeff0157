"""Primitive-op gradients against central finite differences, and the
grad-of-grad machinery that everything else stands on."""

import numpy as np
import pytest

from hessreg.graph import DiffGraph
from hessreg.tensor import (
    GraphError,
    Tensor,
    concat,
    grad,
    log_sum_exp,
    no_grad,
    row_l2_norm,
    sigmoid,
    swish,
    unfold2d,
)


def fd_grad(f, x, eps=1e-6):
    out = np.zeros_like(x, dtype=np.float64)
    flat = out.ravel()
    xf = x.ravel()
    for i in range(x.size):
        xp, xm = xf.copy(), xf.copy()
        xp[i] += eps
        xm[i] -= eps
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * eps)
    return out


def check_op(build, x, rtol=1e-6):
    t = Tensor(x, requires_grad=True)
    y = build(t)
    g = grad(y, t).data

    def scalar(arr):
        return float(build(Tensor(arr)).data)

    fd = fd_grad(scalar, x)
    err = np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(fd)))
    assert err < rtol, err


@pytest.mark.parametrize(
    "name,build",
    [
        ("add", lambda t: (t + t * 2.0 + 1.5).sum()),
        ("sub_div", lambda t: ((t - 0.3) / 1.7).sum()),
        ("mul_self", lambda t: (t * t).sum()),
        ("pow", lambda t: t.pow(3).sum()),
        ("sqrt_shift", lambda t: ((t * t + 1.0).sqrt()).sum()),
        ("exp", lambda t: t.exp().sum()),
        ("log_shift", lambda t: (t * t + 0.5).log().sum()),
        ("abs", lambda t: t.abs().sum()),
        ("neg", lambda t: (-t).sum()),
        ("mean", lambda t: t.mean()),
        ("getitem", lambda t: (t[1:] * 2.0).sum()),
        ("reshape", lambda t: t.reshape(2, 3).sum(axis=0).pow(2).sum()),
        ("sigmoid", lambda t: sigmoid(t).sum()),
        ("swish", lambda t: swish(t).sum()),
        ("lse", lambda t: log_sum_exp(t.reshape(2, 3)).sum()),
        ("norm", lambda t: t.norm()),
    ],
)
def test_unary_chains_match_fd(name, build):
    x = np.array([0.3, -1.2, 0.7, 2.1, -0.4, 0.9])
    check_op(build, x)


def test_matmul_grad_both_sides():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 4))
    B = rng.normal(size=(4, 2))
    ta = Tensor(A, requires_grad=True)
    tb = Tensor(B, requires_grad=True)
    y = ta.matmul(tb).pow(2).sum()
    ga = grad(y, ta).data
    gb = grad(y, tb).data
    fa = fd_grad(lambda a: float(np.sum((a @ B) ** 2)), A)
    fb = fd_grad(lambda b: float(np.sum((A @ b) ** 2)), B)
    assert np.max(np.abs(ga - fa)) < 1e-6
    assert np.max(np.abs(gb - fb)) < 1e-6


def test_broadcast_and_unbroadcast():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 1))
    t = Tensor(x, requires_grad=True)
    y = (t.broadcast_to((3, 4)) * np.arange(12.0).reshape(3, 4)).sum()
    g = grad(y, t).data
    fd = fd_grad(
        lambda a: float(np.sum(np.broadcast_to(a, (3, 4)) * np.arange(12.0).reshape(3, 4))),
        x,
    )
    assert np.allclose(g, fd, atol=1e-7)


def test_concat_grad():
    a = np.array([1.0, 2.0])
    b = np.array([3.0, 4.0, 5.0])
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    y = concat([ta, tb]).pow(2).sum()
    assert np.allclose(grad(y, ta).data, 2 * a)
    assert np.allclose(grad(y, tb).data, 2 * b)


def test_row_l2_norm_zero_row_subgradient():
    x = np.array([[3.0, 4.0], [0.0, 0.0]])
    t = Tensor(x, requires_grad=True)
    y = row_l2_norm(t).sum()
    assert abs(float(y.data) - 5.0) < 1e-12
    g = grad(y, t).data
    assert np.allclose(g[0], [0.6, 0.8])
    # the zero row gets gradient 0, the standard subgradient choice
    assert np.allclose(g[1], 0.0)


def test_unfold2d_matches_manual_patches():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 4, 4, 1))
    t = Tensor(x, requires_grad=True)
    u = unfold2d(t, 3, 3, stride=1, pad=1)
    w = rng.normal(size=u.shape)
    y = (u * w).sum()
    g = grad(y, t).data
    fd = fd_grad(
        lambda a: float(
            np.sum(unfold2d(Tensor(a), 3, 3, stride=1, pad=1).data * w)
        ),
        x,
    )
    assert np.max(np.abs(g - fd)) < 1e-6


def test_grad_of_grad_is_hessian_vector_product():
    # f(x) = sum(x^3): H = diag(6x), so H v = 6 x v elementwise
    x = np.array([0.5, -1.0, 2.0])
    v = np.array([1.0, 2.0, -1.5])
    t = Tensor(x, requires_grad=True)
    g = grad(t.pow(3).sum(), t, create_graph=True)
    hv = grad((g * Tensor(v)).sum(), t).data
    assert np.allclose(hv, 6 * x * v, atol=1e-12)


def test_no_grad_blocks_taping():
    t = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (t * 2.0).sum()
    # nothing was recorded, so t is unreachable and its gradient is zero
    assert np.array_equal(grad(y, t).data, np.zeros(3))


def test_detach_cuts_the_graph():
    t = Tensor(np.ones(3), requires_grad=True)
    y = (t.detach() * t).sum()
    # only the live factor contributes: d/dt (c * t) = c = 1
    assert np.allclose(grad(y, t).data, np.ones(3))


def test_diffgraph_bind_forward_gradient():
    g = DiffGraph(
        lambda lv: (lv["x"] * lv["w"]).sum().pow(2),
        {"x": (3,), "w": (3,)},
    )
    xv, wv = np.array([1.0, 2.0, 3.0]), np.array([0.5, -1.0, 0.25])
    val = g.forward(x=xv, w=wv)
    s = float(xv @ wv)
    assert abs(val - s * s) < 1e-12
    assert np.allclose(g.gradient("x").data, 2 * s * wv)
    assert np.allclose(g.gradient("w").data, 2 * s * xv)


def test_diffgraph_hvp_matches_explicit_hessian():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(4, 4))
    A = (A + A.T) / 2

    g = DiffGraph(
        lambda lv: (
            lv["x"].reshape(1, 4).matmul(Tensor(A)).reshape(4) * lv["x"]
        ).sum() * 0.5,
        {"x": (4,)},
    )
    x0 = rng.normal(size=4)
    g.bind(x=x0)
    v = rng.normal(size=4)
    assert np.allclose(g.hvp("x", v).data, A @ v, atol=1e-10)
    assert np.allclose(g.explicit_hessian("x"), A, atol=1e-10)


def test_diffgraph_shape_mismatch_raises():
    g = DiffGraph(lambda x: x.sum(), {"x": (3,)})
    with pytest.raises(GraphError):
        g.forward(x=np.zeros(4))
