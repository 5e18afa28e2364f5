import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partdisc import autodiff as ad
from partdisc.autodiff import Tensor, backward


def fd_grad(f, x, h=1e-6):
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check_against_fd(build, x, h=1e-6, tol=1e-6):
    """build(Tensor) -> scalar Tensor; compare reverse-mode grad to FD."""
    t = Tensor(x)
    loss = build(t)
    backward(loss)
    num = fd_grad(lambda v: float(build(Tensor(v)).value), x, h=h)
    denom = max(1.0, np.abs(num).max())
    assert np.abs(t.grad - num).max() / denom < tol


class TestElementwise:
    def test_add_mul_chain(self, rng):
        x = rng.normal(size=(3, 4))
        check_against_fd(lambda t: ((t * 2.0 + 1.0) * t).sum(), x)

    def test_sub_div(self, rng):
        x = rng.normal(size=(4,)) + 3.0
        check_against_fd(lambda t: ((t - 0.5) / (t + 2.0)).sum(), x)

    def test_rsub_rdiv(self, rng):
        x = rng.normal(size=(3,)) + 2.0
        check_against_fd(lambda t: ((1.0 - t) + (1.0 / t)).sum(), x)

    def test_exp_log(self, rng):
        x = np.abs(rng.normal(size=(5,))) + 0.5
        check_against_fd(lambda t: (t.log() + (-t).exp()).sum(), x)

    def test_tanh(self, rng):
        x = rng.normal(size=(6,))
        check_against_fd(lambda t: (t.tanh() * t.tanh()).sum(), x)

    def test_relu_away_from_kink(self, rng):
        x = rng.normal(size=(10,))
        x[np.abs(x) < 0.05] = 0.1
        check_against_fd(lambda t: (t.relu() * 3.0).sum(), x)

    def test_pow_sqrt(self, rng):
        x = np.abs(rng.normal(size=(4,))) + 0.2
        check_against_fd(lambda t: (t**3).sum() + t.sqrt().sum(), x)

    def test_neg(self, rng):
        x = rng.normal(size=(3,))
        check_against_fd(lambda t: (-t).sum() * 2.0, x)


class TestBroadcastingAndShape:
    def test_row_broadcast(self, rng):
        x = rng.normal(size=(1, 4))
        check_against_fd(lambda t: (t + Tensor(np.ones((3, 4)))).sum(), x)

    def test_scalar_broadcast_mul(self, rng):
        x = rng.normal(size=())
        check_against_fd(lambda t: (t * Tensor(np.arange(6.0).reshape(2, 3))).sum(), x)

    def test_getitem(self, rng):
        x = rng.normal(size=(5, 3))
        check_against_fd(lambda t: (t[1:4] * 2.0).sum() + t[0].sum(), x)

    def test_getitem_repeated_index_accumulates(self):
        x = np.array([1.0, 2.0])
        t = Tensor(x)
        loss = (t[np.array([0, 0, 1])]).sum()
        backward(loss)
        np.testing.assert_allclose(t.grad, [2.0, 1.0])

    def test_transpose(self, rng):
        x = rng.normal(size=(3, 4))
        check_against_fd(lambda t: (t.T @ Tensor(np.ones((3, 2)))).sum(), x)

    def test_reshape(self, rng):
        x = rng.normal(size=(2, 6))
        check_against_fd(lambda t: (t.reshape(3, 4) ** 2).sum(), x)

    def test_concat_and_stack(self, rng):
        x = rng.normal(size=(2, 3))

        def build(t):
            c = ad.concat([t, t * 2.0], axis=0)
            s = ad.stack([t.sum(axis=0), t.sum(axis=1).sum(keepdims=False) + t.sum(axis=0)])
            return (c * c).sum() + (s * 0.5).sum()

        check_against_fd(build, x)


class TestMatmulReductions:
    def test_matmul_2d(self, rng):
        x = rng.normal(size=(3, 4))
        B = rng.normal(size=(4, 2))
        check_against_fd(lambda t: ((t @ Tensor(B)) ** 2).sum(), x)

    def test_matmul_vec_mat(self, rng):
        x = rng.normal(size=(4,))
        B = rng.normal(size=(4, 3))
        check_against_fd(lambda t: ((t @ Tensor(B)) ** 2).sum(), x)

    def test_matmul_mat_vec(self, rng):
        x = rng.normal(size=(3, 4))
        v = rng.normal(size=(4,))
        check_against_fd(lambda t: ((t @ Tensor(v)) ** 2).sum(), x)

    def test_matmul_vec_vec(self, rng):
        x = rng.normal(size=(5,))
        v = rng.normal(size=(5,))
        check_against_fd(lambda t: (t @ Tensor(v)) * 2.0, x)

    def test_sum_axis_keepdims(self, rng):
        x = rng.normal(size=(3, 4))
        check_against_fd(lambda t: (t.sum(axis=1, keepdims=True) * t).sum(), x)

    def test_mean(self, rng):
        x = rng.normal(size=(4, 5))
        check_against_fd(lambda t: (t.mean(axis=0) ** 2).sum() + t.mean() * 3.0, x)

    def test_max_unique(self, rng):
        x = rng.normal(size=(3, 4))
        check_against_fd(lambda t: t.max(axis=1).sum() + t.max() * 2.0, x)

    def test_max_ties_split_subgradient(self):
        t = Tensor(np.array([2.0, 2.0, 1.0]))
        loss = t.max() * 4.0
        backward(loss)
        np.testing.assert_allclose(t.grad, [2.0, 2.0, 0.0])


class TestCompositeFunctions:
    def test_softmax_rows_matches_numpy_and_fd(self, rng):
        x = rng.normal(size=(4, 5)) * 3
        s = ad.softmax_rows(Tensor(x))
        E = np.exp(x - x.max(axis=1, keepdims=True))
        np.testing.assert_allclose(s.value, E / E.sum(axis=1, keepdims=True), atol=1e-12)
        check_against_fd(lambda t: (ad.softmax_rows(t) ** 2).sum(), x)

    def test_logsumexp_rows_stable(self):
        x = np.array([[1000.0, 1000.0 - 1.0]])
        v = ad.logsumexp_rows(Tensor(x)).value
        assert np.isfinite(v).all()
        np.testing.assert_allclose(v[0, 0], 1000.0 + np.log(1 + np.e**-1), atol=1e-9)

    def test_l2_normalize_rows(self, rng):
        x = rng.normal(size=(3, 4))
        out = ad.l2_normalize_rows(Tensor(x))
        np.testing.assert_allclose(np.linalg.norm(out.value, axis=1), 1.0, atol=1e-9)
        check_against_fd(lambda t: (ad.l2_normalize_rows(t) * Tensor(np.ones((3, 4)))).sum(), x)

    def test_l2_normalize_cols(self, rng):
        x = rng.normal(size=(4, 3))
        out = ad.l2_normalize_cols(Tensor(x))
        np.testing.assert_allclose(np.linalg.norm(out.value, axis=0), 1.0, atol=1e-9)
        check_against_fd(lambda t: (ad.l2_normalize_cols(t) ** 3).sum(), x)

    def test_detach_stops_gradient(self, rng):
        x = rng.normal(size=(3,))
        t = Tensor(x)
        loss = (t * t.detach()).sum()
        backward(loss)
        # d/dt of t * const(t) is const(t), not 2t
        np.testing.assert_allclose(t.grad, x, atol=1e-12)


class TestGraphMechanics:
    def test_shared_subexpression_accumulates(self, rng):
        x = rng.normal(size=(3,))
        t = Tensor(x)
        y = t * 2.0
        loss = (y * y).sum() + y.sum()
        backward(loss)
        np.testing.assert_allclose(t.grad, 8.0 * x + 2.0, atol=1e-12)

    def test_backward_rejects_nonscalar(self):
        with pytest.raises(ValueError):
            backward(Tensor(np.ones(3)))

    def test_grad_reset_between_backwards(self, rng):
        t = Tensor(rng.normal(size=(3,)))
        loss = (t * 3.0).sum()
        backward(loss)
        first = t.grad.copy()
        loss2 = (t * 3.0).sum()
        backward(loss2)
        np.testing.assert_allclose(t.grad, first, atol=0)

    def test_deep_chain_no_recursion_limit(self):
        t = Tensor(np.array(1.0))
        x = t
        for _ in range(5000):
            x = x * 1.0001
        backward(x)
        assert np.isfinite(t.grad)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_property_random_expression(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 3))
    W = rng.standard_normal((3, 3))
    t = Tensor(x)

    def f(v):
        a = v @ W
        b = np.exp(np.tanh(a) + v * 0.5)
        return float((b / (b.sum(axis=1, keepdims=True) + 1.0)).sum())

    def build_fixed(tt):
        a = tt @ Tensor(W)
        b = (a.tanh() + tt * 0.5).exp()
        return (b / (b.sum(axis=1, keepdims=True) + 1.0)).sum()

    loss = build_fixed(t)
    backward(loss)
    num = fd_grad(f, x, h=1e-6)
    assert np.abs(t.grad - num).max() < 1e-5
