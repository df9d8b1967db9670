import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtrg import autodiff as ad
from dtrg.autodiff import Tensor


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def central_diff(f, x, h=1e-6):
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(0).normal(size=(4, 4))
        out = ad.matmul(Tensor(a), Tensor(np.eye(4)))
        np.testing.assert_array_equal(out.data, a)

    def test_scalar(self):
        assert ad.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b),
                                   rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_backward_rule(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        seed = rng.normal(size=(3, 2))
        ad.Tape(ad.matmul(a, b)).backward(seed)
        np.testing.assert_allclose(a.grad, seed @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ seed)


class TestRelu:
    def test_values(self):
        assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_all_negative(self):
        x = Tensor(-np.arange(1.0, 5.0), requires_grad=True)
        y = ad.relu(x)
        ad.backward(ad.sum_(y))
        assert np.all(y.data == 0)
        assert np.all(x.grad == 0)

    def test_gradient_at_zero_is_zero(self):
        x = Tensor([0.0], requires_grad=True)
        ad.backward(ad.sum_(ad.relu(x)))
        assert x.grad[0] == 0.0

    def test_finite_differences_away_from_kink(self):
        rng = np.random.default_rng(3)
        data = rng.uniform(-2, 2, size=20)
        data = data[np.abs(data) > 1e-6]
        x = Tensor(data, requires_grad=True)
        w = rng.normal(size=data.size)
        ad.backward(ad.sum_(ad.mul(ad.relu(x), w)))
        num = central_diff(lambda: float(np.sum(np.maximum(x.data, 0) * w)), x.data)
        assert rel_err(x.grad, num) < 1e-6


class TestL2Normalize:
    def test_three_four(self):
        np.testing.assert_allclose(ad.l2_normalize_rows(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]])

    def test_zero_row(self):
        out = ad.l2_normalize_rows(Tensor(np.zeros((1, 3))), eps=1e-12)
        assert np.all(out.data == 0)

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            ad.l2_normalize_rows(Tensor(np.ones((1, 2))), eps=0)

    def test_jvp_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        seed = rng.normal(size=(4, 8))
        ad.Tape(ad.l2_normalize_rows(x)).backward(seed)

        def f():
            norm = np.linalg.norm(x.data, axis=1, keepdims=True)
            return float(np.sum(seed * x.data / norm))

        assert rel_err(x.grad, central_diff(f, x.data)) < 1e-5


class TestBackward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        ad.backward(ad.mul(x, x))
        assert x.grad == pytest.approx(6.0)

    def test_constant_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        ad.backward(ad.add(ad.mul(ad.sum_(x), 0.0), 5.0))
        assert np.all(x.grad == 0)

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            ad.backward(ad.mul(x, 2.0))

    def test_composed_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        ad.backward(ad.sum_(ad.relu(ad.matmul(a, b))))
        f = lambda: float(np.sum(np.maximum(a.data @ b.data, 0)))  # noqa: E731
        assert rel_err(a.grad, central_diff(f, a.data)) < 1e-5
        assert rel_err(b.grad, central_diff(f, b.data)) < 1e-5

    def test_leaf_gradients_accumulate(self):
        x = Tensor([2.0], requires_grad=True)
        ad.backward(ad.sum_(ad.mul(x, 3.0)))
        ad.backward(ad.sum_(ad.mul(x, 3.0)))
        assert x.grad[0] == 6.0

    def test_shared_subexpression(self):
        x = Tensor([1.5], requires_grad=True)
        y = ad.mul(x, x)
        ad.backward(ad.sum_(ad.add(y, y)))
        assert x.grad[0] == pytest.approx(6.0)

    def test_tape_is_topological(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        loss = ad.sum_(ad.relu(ad.matmul(x, x)))
        tape = ad.Tape(loss)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for parent in node._parents:
                if parent.requires_grad:
                    assert pos[id(parent)] < pos[id(node)]
        assert tape.nodes[-1] is loss

    def test_seed_linearity(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        loss = ad.sum_(ad.exp(ad.matmul(x, x)))
        ad.backward(loss, seed=1.5)
        g1 = x.grad.copy()
        x.zero_grad()
        ad.backward(loss, seed=3.0)
        np.testing.assert_array_equal(x.grad, 2 * g1)

    def test_non_finite_is_an_error(self):
        with pytest.raises(FloatingPointError):
            ad.exp(Tensor([1000.0]))


class TestGradCheck:
    def test_quadratic_form(self):
        rng = np.random.default_rng(7)
        A = rng.normal(size=(4, 4))
        A = A @ A.T
        x = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
        err = ad.grad_check(lambda: ad.sum_(ad.mul(x, ad.matmul(Tensor(A), x))), [x], h=1e-5)
        assert err < 1e-7

    def test_linear(self):
        w = np.arange(1.0, 6.0)
        x = Tensor(np.linspace(-1, 1, 5), requires_grad=True)
        assert ad.grad_check(lambda: ad.sum_(ad.mul(x, w)), [x], h=1e-3) < 1e-9

    def test_bad_step(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            ad.grad_check(lambda: ad.sum_(x), [x], h=0.5)

    def test_detects_wrong_gradient(self):
        x = Tensor([0.3, -0.7], requires_grad=True)

        def broken_square(a):
            return ad._node(a.data ** 2, (a,), lambda g: (3.0 * g * a.data,), "broken")

        assert ad.grad_check(lambda: ad.sum_(broken_square(x)), [x]) > 0.1


class TestOtherOps:
    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_broadcast_binary(self, op):
        rng = np.random.default_rng(8)
        a = Tensor(rng.uniform(0.5, 2, size=(3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 2, size=(1, 4)), requires_grad=True)
        fn = getattr(ad, op)
        assert ad.grad_check(lambda: ad.sum_(ad.exp(fn(a, b))), [a, b]) < 1e-6

    def test_log_softmax(self):
        rng = np.random.default_rng(9)
        a = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        w = rng.normal(size=(3, 5))
        assert ad.grad_check(lambda: ad.sum_(ad.mul(ad.log_softmax(a), w)), [a]) < 1e-6

    def test_conv2d_and_pools(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        mix = rng.normal(size=(2, 3))

        def f():
            h = ad.conv2d(x, w, b, stride=2, pad=1)
            return ad.sum_(ad.mul(ad.add(ad.global_avg_pool(h), ad.global_max_pool(h)), mix))

        assert ad.grad_check(f, [x, w, b]) < 1e-5

    def test_conv2d_matches_direct_loop(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(1, 2, 3, 3))
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor([0.5]), pad=0).data
        ref = np.zeros((1, 1, 2, 2))
        for i in range(2):
            for j in range(2):
                ref[0, 0, i, j] = np.sum(x[0, :, i:i + 3, j:j + 3] * w[0]) + 0.5
        np.testing.assert_allclose(out, ref, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_random_composites_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.uniform(-2, 2, size=(3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, size=(4, 3)), requires_grad=True)
    w = rng.uniform(-2, 2, size=(3, 3))

    def f():
        h = ad.l2_normalize_rows(ad.matmul(a, b))
        return ad.sum_(ad.mul(ad.log_softmax(ad.exp(h)), w))

    assert ad.grad_check(f, [a, b], h=1e-6) < 1e-4
