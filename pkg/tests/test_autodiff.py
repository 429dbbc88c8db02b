"""Tensor op gradients against finite differences and hand-worked values."""

import numpy as np
import pytest

from scvqa import autodiff as ad
from scvqa.autodiff import (NonFiniteError, ShapeError, Tensor, grad_check,
                            gradients)


def fd_grad(f, x, step=1e-6):
    """Independent central-difference gradient of a scalar function."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy(); xp[idx] += step
        xm = x.copy(); xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2 * step)
        it.iternext()
    return g


def check_unary(op, x, f_np, atol=1e-6):
    t = Tensor(x, requires_grad=True)
    out = ad.reduce_sum(ad.mul(op(t), op(t)))
    out.backward()
    want = fd_grad(lambda a: float(np.sum(f_np(a) ** 2)), x)
    np.testing.assert_allclose(t.grad, want, rtol=1e-5, atol=atol)


def test_hand_worked_polynomial_gradient():
    # f(x) = x^2 + 3x at x = 2 -> f' = 2x + 3 = 7
    x = Tensor(np.array([2.0]), requires_grad=True)
    f = ad.add(ad.mul(x, x), ad.mul(x, 3.0))
    f.backward()
    assert x.grad[0] == pytest.approx(7.0, abs=1e-12)


def test_unary_ops_match_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.2, 1.5, (3, 4))
    check_unary(ad.relu, x, lambda a: np.maximum(a, 0.0))
    check_unary(ad.exp, x, np.exp)
    check_unary(ad.log, x, np.log)
    check_unary(ad.sqrt, x, np.sqrt)
    check_unary(ad.tanh, x, np.tanh)
    check_unary(ad.sigmoid, x, lambda a: 1 / (1 + np.exp(-a)))


def test_matmul_gradients_all_rank_combinations():
    rng = np.random.default_rng(1)
    shapes = [((3, 4), (4, 2)), ((4,), (4, 2)), ((3, 4), (4,)), ((4,), (4,)),
              ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 5))]
    for sa, sb in shapes:
        a = rng.standard_normal(sa)
        b = rng.standard_normal(sb)
        ta = Tensor(a, requires_grad=True)
        tb = Tensor(b, requires_grad=True)
        out = ad.reduce_sum(ad.matmul(ta, tb))
        out.backward()
        np.testing.assert_allclose(
            ta.grad, fd_grad(lambda v: float(np.sum(v @ b)), a),
            rtol=1e-5, atol=1e-7, err_msg=f"{sa} @ {sb} lhs")
        np.testing.assert_allclose(
            tb.grad, fd_grad(lambda v: float(np.sum(a @ v)), b),
            rtol=1e-5, atol=1e-7, err_msg=f"{sa} @ {sb} rhs")


def test_broadcast_add_mul_gradients():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal(4)
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    out = ad.reduce_sum(ad.mul(ad.add(ta, tb), ad.add(ta, tb)))
    out.backward()
    np.testing.assert_allclose(
        tb.grad, fd_grad(lambda v: float(np.sum((a + v) ** 2)), b), rtol=1e-5)
    assert tb.grad.shape == b.shape


def test_div_and_power_gradients():
    rng = np.random.default_rng(3)
    a = rng.uniform(0.5, 2.0, (2, 3))
    b = rng.uniform(0.5, 2.0, (2, 3))
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    ad.reduce_sum(ad.div(ta, tb)).backward()
    np.testing.assert_allclose(ta.grad, 1.0 / b, rtol=1e-12)
    np.testing.assert_allclose(tb.grad, -a / b ** 2, rtol=1e-12)
    tc = Tensor(a, requires_grad=True)
    ad.reduce_sum(ad.power(tc, 3.0)).backward()
    np.testing.assert_allclose(tc.grad, 3.0 * a ** 2, rtol=1e-12)


def test_softmax_log_softmax_closed_forms():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5,))
    s = ad.softmax(Tensor(x), axis=-1).data
    want = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(s, want, rtol=1e-12)
    ls = ad.log_softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(ls, np.log(want), rtol=1e-12)
    # gradient of -log_softmax[i] is softmax - onehot(i)
    t = Tensor(x, requires_grad=True)
    loss = ad.mul(ad.log_softmax(t, axis=-1)[2], -1.0)
    loss.backward()
    onehot = np.zeros(5); onehot[2] = 1.0
    np.testing.assert_allclose(t.grad, want - onehot, rtol=1e-10, atol=1e-12)


def test_layernorm_gradient_and_value():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 6))
    out = ad.layernorm(Tensor(x)).data
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    np.testing.assert_allclose(out, (x - mu) / np.sqrt(var + 1e-5), rtol=1e-12)
    t = Tensor(x, requires_grad=True)
    ad.reduce_sum(ad.mul(ad.layernorm(t), ad.layernorm(t))).backward()
    want = fd_grad(lambda v: float(np.sum(
        ((v - v.mean(-1, keepdims=True))
         / np.sqrt(v.var(-1, keepdims=True) + 1e-5)) ** 2)), x)
    np.testing.assert_allclose(t.grad, want, rtol=1e-4, atol=1e-7)


def test_take_accumulates_duplicate_indices():
    emb = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    out = emb[np.array([0, 0, 2])]
    ad.reduce_sum(out).backward()
    np.testing.assert_array_equal(emb.grad, [[2, 2], [0, 0], [1, 1]])


def test_concatenate_stack_reshape_transpose_gradients():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((2, 3))
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    cat = ad.concatenate([ta, tb], axis=0)
    st = ad.stack([ta, tb], axis=1)
    out = ad.add(ad.reduce_sum(ad.mul(cat, cat)),
                 ad.reduce_sum(ad.transpose(st, (2, 0, 1))))
    out.backward()
    np.testing.assert_allclose(ta.grad, 2 * a + 1, rtol=1e-12)
    np.testing.assert_allclose(tb.grad, 2 * b + 1, rtol=1e-12)
    tc = Tensor(a, requires_grad=True)
    ad.reduce_sum(ad.mul(ad.reshape(tc, (6,)), np.arange(6.0))).backward()
    np.testing.assert_allclose(tc.grad, np.arange(6.0).reshape(2, 3))


def test_reduce_mean_axis_gradient():
    x = Tensor(np.ones((4, 5)), requires_grad=True)
    ad.reduce_sum(ad.reduce_mean(x, axis=1)).backward()
    np.testing.assert_allclose(x.grad, np.full((4, 5), 0.2))


def test_diamond_graph_accumulates_both_paths():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = ad.mul(x, 2.0)
    z = ad.add(ad.mul(y, x), y)       # z = 2x^2 + 2x -> z' = 4x + 2 = 14
    z.backward()
    assert x.grad[0] == pytest.approx(14.0, abs=1e-12)


def test_gradients_returns_zeros_for_unreached_params():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    loss = ad.reduce_sum(a)
    g = gradients(loss, {"a": a, "b": b})
    np.testing.assert_array_equal(g["a"], np.ones(2))
    np.testing.assert_array_equal(g["b"], np.zeros(3))


def test_gradients_rejects_nonscalar_loss():
    a = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ShapeError):
        gradients(ad.mul(a, 2.0), {"a": a})


def test_nonfinite_values_rejected():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0, np.nan]))
    with pytest.raises(NonFiniteError):
        ad.log(Tensor(np.array([0.0])))


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.concatenate([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))],
                       axis=0)


def test_grad_check_passes_on_smooth_function():
    rng = np.random.default_rng(7)
    params = {"w": Tensor(rng.standard_normal((3, 3)), requires_grad=True),
              "b": Tensor(rng.standard_normal(3), requires_grad=True)}

    def loss_fn():
        h = ad.tanh(ad.add(ad.matmul(Tensor(np.ones(3)), params["w"]),
                           params["b"]))
        return ad.reshape(ad.reduce_sum(ad.mul(h, h)), (1,))

    report = grad_check(loss_fn, params, rng=np.random.default_rng(0))
    assert report.passed and not report.vacuous
    assert report.max_rel_error < 1e-4


def test_grad_check_flags_vacuous_all_zero_gradients():
    params = {"w": Tensor(np.ones(3), requires_grad=True)}

    def loss_fn():
        return ad.reshape(ad.reduce_sum(ad.mul(params["w"], 0.0)), (1,))

    report = grad_check(loss_fn, params, rng=np.random.default_rng(0))
    assert report.vacuous
