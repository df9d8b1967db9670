import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtrg import autodiff as ad
from dtrg.autodiff import Tensor
from dtrg.relgraph import (build_target_graph, cos_sim, dump_graph_csv, gsl_euclidean, gsl_kl, gsl_mixed,
                           sample_graph, sim)

E = math.e


class TestSimilarity:
    def test_orthogonal(self):
        assert cos_sim([1, 0], [0, 1]) == 0.0

    def test_scale_invariant(self):
        v = np.array([0.3, -1.2, 2.0])
        assert cos_sim(v, 3 * v) == pytest.approx(1.0, abs=1e-15)

    def test_direct_formula(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b = rng.normal(size=5), rng.normal(size=5)
            ref = sum(a * b) / math.sqrt(sum(a * a) * sum(b * b))
            assert cos_sim(a, b) == pytest.approx(ref, abs=1e-12)

    def test_identical(self):
        assert sim([1.0, 2.0], [1.0, 2.0], 1.0) == pytest.approx(2.718282, abs=1e-6)

    def test_antipodal(self):
        assert sim([1.0, 2.0], [-1.0, -2.0], 2.0) == pytest.approx(0.606531, abs=1e-6)

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            sim([1.0], [1.0], 0.0)

    def test_vanilla_temperature_diagonal_is_e(self):
        G = build_target_graph(np.random.default_rng(1).normal(size=(4, 3)), tau=1.0).G
        np.testing.assert_allclose(np.diag(G), E, atol=1e-12)


class TestTargetGraph:
    def test_orthogonal_centers(self):
        g = build_target_graph(np.eye(2), tau=1.0)
        np.testing.assert_allclose(g.G, [[E, 1.0], [1.0, E]], atol=1e-15)

    def test_identical_centers(self):
        g = build_target_graph(np.tile([[1.0, 2.0, 3.0]], (4, 1)), tau=2.0)
        np.testing.assert_allclose(g.G, math.exp(0.5), atol=1e-12)
        np.testing.assert_allclose(g.G_hat, 0.25, atol=1e-12)

    def test_double_loop(self):
        rng = np.random.default_rng(2)
        C = rng.normal(size=(5, 4))
        g = build_target_graph(C, tau=1.5)
        for k in range(5):
            for l in range(5):
                assert g.G[k, l] == pytest.approx(sim(C[k], C[l], 1.5), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.2, 5.0))
    def test_invariants(self, seed, tau):
        C = np.random.default_rng(seed).normal(size=(6, 4))
        g = build_target_graph(C, tau)
        assert np.max(np.abs(g.G - g.G.T)) < 1e-12
        assert np.all(g.G >= math.exp(-1 / tau) - 1e-12) and np.all(g.G <= math.exp(1 / tau) + 1e-12)
        np.testing.assert_allclose(np.diag(g.G), math.exp(1 / tau), atol=1e-12)
        np.testing.assert_allclose(g.G_hat.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(g.G_hat > 0)

    def test_dump(self, tmp_path):
        g = build_target_graph(np.eye(3), 1.0, epoch=4)
        dump_graph_csv(g, tmp_path / "g.csv")
        lines = (tmp_path / "g.csv").read_text().splitlines()
        assert lines[0].startswith("# epoch=4")
        assert len(lines) == 4 and all(len(row.split(",")) == 3 for row in lines[1:])


class TestSampleGraph:
    def test_center_row_matches_graph_row(self):
        C = np.random.default_rng(3).normal(size=(5, 4))
        g = build_target_graph(C, 1.0)
        S = sample_graph(Tensor(C), C, 1.0).S.data
        np.testing.assert_allclose(S, g.G, rtol=0, atol=1e-12)

    def test_orthogonal_feature(self):
        C = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        S = sample_graph(Tensor([[0.0, 0.0, 2.0]]), C, 1.0)
        np.testing.assert_allclose(S.S.data, [[1.0, 1.0]])
        np.testing.assert_allclose(S.S_hat.data, [[0.5, 0.5]])

    def test_gradient_of_sum(self):
        rng = np.random.default_rng(4)
        C = rng.normal(size=(3, 4))
        z = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        assert ad.grad_check(lambda: ad.sum_(sample_graph(z, C, 1.0).S), [z]) < 1e-5

    def test_rows_normalized(self):
        rng = np.random.default_rng(5)
        S = sample_graph(Tensor(rng.normal(size=(7, 3))), rng.normal(size=(4, 3)), 2.0)
        np.testing.assert_allclose(S.S_hat.data.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(S.S.data >= math.exp(-0.5) - 1e-12) and np.all(S.S.data <= math.exp(0.5) + 1e-12)

    def test_width_checked(self):
        with pytest.raises(ad.DimensionError):
            sample_graph(Tensor(np.ones((1, 3))), np.ones((2, 4)), 1.0)


class TestEuclideanGSL:
    def test_zero_on_target(self):
        G = build_target_graph(np.random.default_rng(6).normal(size=(3, 2)), 1.0).G
        y = [2, 0, 1]
        assert gsl_euclidean(Tensor(G[y]), G, y).item() == 0.0

    def test_hand_value(self):
        G = np.array([[E, 1.0], [1.0, E]])
        assert gsl_euclidean(Tensor([[E, 1.0]]), G, [1]).item() == pytest.approx(2 * (E - 1) ** 2, abs=1e-9)
        assert 2 * (E - 1) ** 2 == pytest.approx(5.9050, abs=1e-4)

    def test_direct_formula(self):
        rng = np.random.default_rng(7)
        S, G, y = rng.normal(size=(6, 4)), rng.normal(size=(4, 4)), rng.integers(0, 4, 6)
        ref = np.mean([sum((S[i, j] - G[y[i], j]) ** 2 for j in range(4)) for i in range(6)])
        assert gsl_euclidean(Tensor(S), G, y).item() == pytest.approx(ref, abs=1e-12)

    def test_label_range(self):
        with pytest.raises(ValueError):
            gsl_euclidean(Tensor(np.ones((1, 2))), np.ones((2, 2)), [5])


class TestKLGSL:
    def test_zero_for_equal(self):
        Gh = build_target_graph(np.random.default_rng(8).normal(size=(3, 2)), 1.0).G_hat
        assert abs(gsl_kl(Tensor(Gh[[0, 2]]), Gh, [0, 2]).item()) < 1e-12

    def test_hand_value(self):
        val = gsl_kl(Tensor([[0.9, 0.1]]), np.array([[0.5, 0.5]]), [0]).item()
        assert val == pytest.approx(0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1), abs=1e-9)
        assert val == pytest.approx(0.510826, abs=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_gibbs(self, seed):
        rng = np.random.default_rng(seed)
        P = rng.uniform(0.01, 1, size=(4, 5))
        Q = rng.uniform(0.01, 1, size=(3, 5))
        P /= P.sum(axis=1, keepdims=True)
        Q /= Q.sum(axis=1, keepdims=True)
        assert gsl_kl(Tensor(Q), P, rng.integers(0, 4, 3)).item() >= -1e-15

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            gsl_kl(Tensor([[1.0, 0.0]]), np.array([[0.5, 0.5]]), [0])

    def test_gradient_only_through_sample(self):
        rng = np.random.default_rng(9)
        C = rng.normal(size=(3, 4))
        g = build_target_graph(C, 1.0)
        z = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        y = [0, 1, 2, 1]
        assert ad.grad_check(lambda: gsl_kl(sample_graph(z, C, 1.0).S_hat, g.G_hat, y), [z]) < 1e-5


class TestMixedGSL:
    def setup_method(self):
        rng = np.random.default_rng(10)
        self.G = build_target_graph(rng.normal(size=(4, 3)), 1.0).G
        self.S = Tensor(rng.uniform(0.5, 2.5, size=(5, 4)))
        self.y_a = rng.integers(0, 4, 5)
        self.y_b = rng.integers(0, 4, 5)

    def test_endpoints(self):
        assert gsl_mixed(self.S, self.G, self.y_a, self.y_b, np.zeros(5)).item() == \
            gsl_euclidean(self.S, self.G, self.y_a).item()
        assert gsl_mixed(self.S, self.G, self.y_a, self.y_b, np.ones(5)).item() == \
            gsl_euclidean(self.S, self.G, self.y_b).item()

    def test_direct_formula(self):
        lam = np.random.default_rng(11).uniform(size=5)
        S = self.S.data
        ref = np.mean([(1 - lam[i]) * np.sum((S[i] - self.G[self.y_a[i]]) ** 2)
                       + lam[i] * np.sum((S[i] - self.G[self.y_b[i]]) ** 2) for i in range(5)])
        assert gsl_mixed(self.S, self.G, self.y_a, self.y_b, lam).item() == pytest.approx(ref, abs=1e-12)

    def test_linear_in_lambda(self):
        f = [gsl_mixed(self.S, self.G, self.y_a, self.y_b, lam).item() for lam in (0.0, 0.4, 1.0)]
        assert f[1] == pytest.approx(0.6 * f[0] + 0.4 * f[2], abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_invariant_to_feature_rescaling(seed):
    rng = np.random.default_rng(seed)
    C = rng.normal(size=(4, 3))
    g = build_target_graph(C, 1.0)
    z = rng.normal(size=(5, 3))
    y = rng.integers(0, 4, 5)
    scaled = z.copy()
    scaled[2] *= 3.0
    for loss in (lambda s: gsl_euclidean(s.S, g.G, y), lambda s: gsl_kl(s.S_hat, g.G_hat, y)):
        a = loss(sample_graph(Tensor(z), C, 1.0)).item()
        b = loss(sample_graph(Tensor(scaled), C, 1.0)).item()
        assert a == pytest.approx(b, rel=1e-12, abs=1e-14)


def test_losses_vanish_when_features_sit_on_centers():
    C = np.random.default_rng(12).normal(size=(4, 3))
    g = build_target_graph(C, 1.0)
    y = np.array([3, 1, 0, 2, 1])
    s = sample_graph(Tensor(C[y]), C, 1.0)
    assert gsl_euclidean(s.S, g.G, y).item() < 1e-24
    assert abs(gsl_kl(s.S_hat, g.G_hat, y).item()) < 1e-12
