"""Reverse-mode tape: every op's backward against central finite
differences through fixed linear probes, plus graph bookkeeping
(accumulation, reuse, no_grad)."""

import numpy as np
import pytest

from pointweave import DimensionError, ValidationError
from pointweave import autodiff as ad


def fd_vs_analytic(build, shapes, h=1e-6, seed=0):
    """build(tensors) -> scalar Tensor. Probes every input element with a
    central difference of the scalar and compares to the tape gradient.
    Returns max relative error across inputs (norm ratio per input)."""
    rng = np.random.default_rng(seed)
    datas = [rng.standard_normal(s) for s in shapes]
    params = [ad.parameter(d.copy()) for d in datas]
    out = build(*params)
    out.backward()
    worst = 0.0
    for t in params:
        flat = t.data.reshape(-1)
        gn = np.empty_like(flat)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + h
            with ad.no_grad():
                up = build(*params).item()
            flat[k] = keep - h
            with ad.no_grad():
                dn = build(*params).item()
            flat[k] = keep
            gn[k] = (up - dn) / (2 * h)
        ga = t.grad.reshape(-1)
        err = np.linalg.norm(ga - gn) / max(np.linalg.norm(ga), np.linalg.norm(gn), 1e-12)
        worst = max(worst, err)
    return worst


def probe(x, seed=99):
    """Fixed random linear functional so vector outputs reduce to a scalar."""
    rng = np.random.default_rng(seed)
    return ad.sum_all(ad.mul(x, ad.constant(rng.standard_normal(x.shape))))


# ----------------------------------------------------------------- elementwise


def test_add_sub_mul_scale_grads():
    err = fd_vs_analytic(
        lambda a, b: probe(ad.add(ad.mul(a, b), ad.scale(ad.sub(a, b), 0.7))),
        [(2, 3, 4, 4), (2, 3, 4, 4)],
    )
    assert err < 1e-8


def test_scalar_broadcast_add():
    # adding a 1-element tensor broadcasts; its gradient is the total sum
    a = ad.parameter(np.arange(6.0).reshape(2, 3))
    s = ad.parameter(np.array(2.0))
    out = ad.sum_all(ad.add(a, s))
    out.backward()
    assert s.grad.shape == () and s.grad == 6.0
    assert np.array_equal(a.grad, np.ones((2, 3)))


def test_elu_tanh_square_absolute_grads():
    # inputs kept away from the |x| kink so the FD probe is clean
    rng = np.random.default_rng(1)
    base = rng.uniform(0.3, 1.5, (2, 2, 3, 3)) * np.where(rng.random((2, 2, 3, 3)) < 0.5, -1, 1)
    a = ad.parameter(base)
    out = probe(ad.add(ad.elu(a), ad.add(ad.tanh(a), ad.add(ad.square(a), ad.absolute(a)))))
    out.backward()
    ga = a.grad.copy()
    gn = np.empty_like(ga).reshape(-1)
    flat = a.data.reshape(-1)
    for k in range(flat.size):
        keep = flat[k]
        flat[k] = keep + 1e-6
        with ad.no_grad():
            up = probe(ad.add(ad.elu(a), ad.add(ad.tanh(a), ad.add(ad.square(a), ad.absolute(a))))).item()
        flat[k] = keep - 1e-6
        with ad.no_grad():
            dn = probe(ad.add(ad.elu(a), ad.add(ad.tanh(a), ad.add(ad.square(a), ad.absolute(a))))).item()
        flat[k] = keep
        gn[k] = (up - dn) / 2e-6
    assert np.linalg.norm(ga.reshape(-1) - gn) / np.linalg.norm(gn) < 1e-8


def test_elu_hand_values():
    a = ad.parameter(np.array([[-1.0, 0.0, 2.0]]))
    out = ad.elu(a)
    assert np.allclose(out.data, [np.expm1(-1.0), 0.0, 2.0])
    out.backward(np.ones_like(out.data))
    assert np.allclose(a.grad, [np.exp(-1.0), 1.0, 1.0])


# ----------------------------------------------------------------- shape ops


def test_concat_three_way_grads():
    err = fd_vs_analytic(
        lambda a, b, c: probe(ad.concat([a, b, c], axis=1)),
        [(1, 2, 3, 3), (1, 1, 3, 3), (1, 4, 3, 3)],
    )
    assert err < 1e-8


def test_concat_routes_gradient_to_the_right_slice():
    a = ad.parameter(np.zeros((1, 2, 2, 2)))
    b = ad.parameter(np.zeros((1, 1, 2, 2)))
    out = ad.concat([a, b], axis=1)
    g = np.arange(12.0).reshape(1, 3, 2, 2)
    out.backward(g)
    assert np.array_equal(a.grad, g[:, :2])
    assert np.array_equal(b.grad, g[:, 2:])


def test_crop_grads_scatter_back():
    a = ad.parameter(np.random.default_rng(2).standard_normal((1, 1, 5, 6)))
    out = ad.crop(a, 1, 2, 3, 3)
    assert out.shape == (1, 1, 3, 3)
    g = np.ones((1, 1, 3, 3))
    out.backward(g)
    expect = np.zeros((1, 1, 5, 6))
    expect[:, :, 1:4, 2:5] = 1.0
    assert np.array_equal(a.grad, expect)


# ----------------------------------------------------------------- conv family


def test_conv2d_grads():
    err = fd_vs_analytic(
        lambda x, w, b: probe(ad.conv2d(x, w, b, stride=1, pad=1)),
        [(2, 3, 5, 5), (4, 3, 3, 3), (4,)],
    )
    assert err < 1e-7


def test_conv2d_strided_grads():
    err = fd_vs_analytic(
        lambda x, w, b: probe(ad.conv2d(x, w, b, stride=2, pad=1)),
        [(1, 2, 6, 6), (3, 2, 3, 3), (3,)],
    )
    assert err < 1e-7


def test_conv2d_pooling_config_grads():
    # 2x2 kernel, stride 2, no padding: the mean-pool arrangement
    err = fd_vs_analytic(
        lambda x, w: probe(ad.conv2d(x, w, None, stride=2, pad=0)),
        [(1, 2, 6, 6), (1, 2, 2, 2)],
    )
    assert err < 1e-7


def test_conv2d_identity_kernel():
    x = np.random.default_rng(3).standard_normal((1, 1, 4, 4))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = ad.conv2d(ad.constant(x), ad.constant(w), None, stride=1, pad=1)
    assert np.allclose(out.data, x, atol=1e-14)


def test_conv2d_mean_pool_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    w = np.full((1, 1, 2, 2), 0.25)
    out = ad.conv2d(ad.constant(x), ad.constant(w), None, stride=2, pad=0)
    assert np.allclose(out.data[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_conv_transpose2d_grads():
    err = fd_vs_analytic(
        lambda x, w, b: probe(ad.conv_transpose2d(x, w, b, stride=2, pad=1)),
        [(2, 3, 4, 4), (3, 2, 4, 4), (2,)],
    )
    assert err < 1e-7


def test_conv_transpose_is_conv_adjoint():
    # <conv(x), y> == <x, conv_transpose(y)> with shared kernels
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((3, 2, 4, 4))
    y = rng.standard_normal((1, 3, 3, 3))
    cx = ad.conv2d(ad.constant(x), ad.constant(w), None, stride=2, pad=1)
    # the same (3, 2, kh, kw) array reads as (in, out, kh, kw) for the adjoint
    ty = ad.conv_transpose2d(ad.constant(y), ad.constant(w), None, stride=2, pad=1)
    assert cx.shape == y.shape and ty.shape == x.shape
    assert abs(np.sum(cx.data * y) - np.sum(x * ty.data)) < 1e-10


def test_instance_norm_grads():
    err = fd_vs_analytic(
        lambda x, g, b: probe(ad.instance_norm(x, g, b)),
        [(2, 3, 4, 4), (3,), (3,)],
    )
    assert err < 1e-6


def test_instance_norm_statistics():
    rng = np.random.default_rng(5)
    x = rng.uniform(-4.0, 9.0, (2, 3, 8, 8))
    out = ad.instance_norm(ad.constant(x), ad.constant(np.ones(3)), ad.constant(np.zeros(3)))
    mean = out.data.mean(axis=(2, 3))
    var = out.data.var(axis=(2, 3))
    assert np.max(np.abs(mean)) < 1e-5
    assert np.max(np.abs(var - 1.0)) < 1e-5


def test_warp_gather_grads_and_inert_taps():
    rng = np.random.default_rng(6)
    n, c, h, w = 1, 2, 3, 3
    p = h * w
    idx = rng.integers(0, p, (n, 4, p))
    wts = rng.random((n, 4, p))
    wts[0, :, 0] = 0.0  # first output pixel: all taps inert
    idx[0, 0, 1] = 0  # duplicate-index accumulation path
    idx[0, 1, 1] = 0
    err = fd_vs_analytic(lambda x: probe(ad.warp_gather(x, idx, wts)), [(n, c, h, w)])
    assert err < 1e-8
    out = ad.warp_gather(ad.constant(rng.standard_normal((n, c, h, w))), idx, wts)
    assert np.allclose(out.data.reshape(n, c, p)[:, :, 0], 0.0)


def test_warp_gather_identity_taps():
    x = np.random.default_rng(7).standard_normal((1, 1, 2, 2))
    idx = np.tile(np.arange(4), (1, 4, 1))
    wts = np.zeros((1, 4, 4))
    wts[0, 0] = 1.0
    out = ad.warp_gather(ad.constant(x), idx, wts)
    assert np.array_equal(out.data.reshape(1, 1, 2, 2), x)


# ----------------------------------------------------------------- graph bookkeeping


def test_diamond_graph_accumulates_once():
    # y = a*a + a*a: gradient 4a, each path visited exactly once
    a = ad.parameter(np.array([3.0]))
    sq = ad.mul(a, a)
    out = ad.sum_all(ad.add(sq, sq))
    out.backward()
    assert np.allclose(a.grad, [12.0])


def test_reused_subexpression_grad():
    a = ad.parameter(np.array([2.0]))
    b = ad.mul(a, a)  # a^2
    c = ad.mul(b, b)  # a^4
    out = ad.sum_all(ad.add(c, b))
    out.backward()
    # d/da (a^4 + a^2) = 4 a^3 + 2a = 36 at a=2
    assert np.allclose(a.grad, [36.0])


def test_backward_requires_scalar_without_seed():
    a = ad.parameter(np.ones((2, 2)))
    with pytest.raises(ValidationError):
        ad.add(a, a).backward()


def test_zero_grad_resets_accumulation():
    a = ad.parameter(np.array([1.0]))
    out = ad.sum_all(ad.mul(a, a))
    out.backward()
    first = a.grad.copy()
    a.zero_grad()
    out2 = ad.sum_all(ad.mul(a, a))
    out2.backward()
    assert np.array_equal(a.grad, first)


def test_no_grad_builds_no_graph():
    a = ad.parameter(np.array([1.5]))
    with ad.no_grad():
        out = ad.sum_all(ad.mul(a, a))
    assert out._parents == () and not out.requires_grad
    assert a.grad is None


def test_constant_gets_no_gradient():
    a = ad.parameter(np.array([2.0]))
    c = ad.constant(np.array([5.0]))
    out = ad.sum_all(ad.mul(a, c))
    out.backward()
    assert np.allclose(a.grad, [5.0])
    assert c.grad is None


def test_shape_mismatch_raises():
    a = ad.parameter(np.ones((2, 3)))
    b = ad.parameter(np.ones((3, 2)))
    with pytest.raises(DimensionError):
        ad.add(a, b)
    with pytest.raises(DimensionError):
        ad.conv2d(ad.parameter(np.ones((1, 2, 4, 4))), ad.parameter(np.ones((1, 3, 3, 3))))
