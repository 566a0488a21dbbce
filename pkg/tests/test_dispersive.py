import numpy as np
import pytest

from spectraflow import autodiff as ad
from spectraflow import dispersive as dsp
from spectraflow.autodiff import ContractError, Var


def loop_disp_l2(h, tau, eps):
    b = len(h)
    acc = [np.exp(-np.sum((h[i] - h[j]) ** 2) / tau) for i in range(b) for j in range(b) if i != j]
    return np.log(np.mean(acc) + eps)


class TestValues:
    def test_two_points_at_tau(self):
        tau = 0.5
        h = np.array([[0.0, 0.0], [np.sqrt(tau), 0.0]])
        assert float(dsp.disp_l2(h, tau, eps=0.0).value) == pytest.approx(-1.0, abs=1e-12)
        assert float(dsp.disp_l2(h, tau).value) == pytest.approx(np.log(np.exp(-1) + 1e-8), abs=1e-12)

    def test_identical_batch(self):
        h = np.ones((4, 3))
        assert float(dsp.disp_l2(h).value) == pytest.approx(np.log(1 + 1e-8), abs=1e-15)

    def test_matches_loop(self):
        h = np.random.default_rng(0).standard_normal((6, 5))
        assert float(dsp.disp_l2(h, 0.7, 1e-3).value) == pytest.approx(loop_disp_l2(h, 0.7, 1e-3), rel=1e-12)

    def test_far_apart_is_stable(self):
        h = np.array([[0.0], [1e3]])
        val = float(dsp.disp_l2(h, 0.5).value)
        assert val == pytest.approx(np.log(1e-8), rel=1e-9)

    def test_hinge_inactive(self):
        h = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]])
        assert float(dsp.disp_hinge(h, margin=1.0).value) == 0.0

    def test_hinge_active(self):
        h = np.array([[0.0], [0.5]])
        assert float(dsp.disp_hinge(h, margin=1.0).value) == pytest.approx(0.75**2)

    def test_covariance_example(self):
        h = np.array([[1.0, 1.0], [-1.0, -1.0]])
        cov = np.cov(h.T)  # independent oracle, unbiased like the loss
        off = cov - np.diag(np.diag(cov))
        assert float(dsp.disp_covariance(h).value) == pytest.approx(np.sum(off**2), abs=1e-12)
        assert float(dsp.disp_covariance(h).value) == pytest.approx(8.0, abs=1e-12)

    def test_cosine_orthogonal(self):
        h = np.eye(2)
        # dissimilarity 1 for both ordered pairs
        assert float(dsp.disp_cosine(h, tau=1.0, eps=0.0).value) == pytest.approx(-1.0)

    def test_cosine_zero_row_rejected(self):
        with pytest.raises(ContractError):
            dsp.disp_cosine(np.array([[0.0, 0.0], [1.0, 0.0]]))

    @pytest.mark.parametrize("variant", dsp.VARIANTS)
    def test_dispatch(self, variant):
        h = np.random.default_rng(1).standard_normal((4, 3))
        assert np.isfinite(float(dsp.dispersive(h, variant).value))

    def test_unknown_variant(self):
        with pytest.raises(ContractError):
            dsp.dispersive(np.ones((2, 2)), "nope")

    def test_contracts(self):
        with pytest.raises(ContractError):
            dsp.disp_l2(np.ones((1, 3)))
        with pytest.raises(ContractError):
            dsp.disp_l2(np.ones(3))
        with pytest.raises(ContractError):
            dsp.disp_l2(np.ones((2, 3)), tau=0.0)
        with pytest.raises(ContractError):
            dsp.stage1_loss(Var(1.0), Var(1.0), -0.1)

    def test_stage1_loss_combination(self):
        assert float(dsp.stage1_loss(Var(2.0), Var(-1.0), 0.4).value) == pytest.approx(1.6)


class TestInfoNCE:
    def test_decomposition(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            h = rng.standard_normal((5, 4))
            p = rng.standard_normal((5, 4))
            pos = np.mean(np.sum((h - p) ** 2, axis=1)) / 0.5
            total = float(dsp.info_nce(h, p, 0.5).value)
            assert total == pytest.approx(pos + float(dsp.disp_lse(h, 0.5).value), abs=1e-12)

    def test_matches_direct_ratio(self):
        rng = np.random.default_rng(3)
        h, p = rng.standard_normal((2, 6, 3))
        assert float(dsp.info_nce(h, p).value) == pytest.approx(dsp.info_nce_direct(h, p), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            dsp.info_nce(np.ones((3, 2)), np.ones((2, 2)))


class TestGradients:
    def test_anchor_gradient_two_points(self):
        tau = 0.5
        h = np.array([[0.0, 0.0], [1.0, 0.0]])
        w12 = np.exp(-2.0) / (1 + np.exp(-2.0))
        g = dsp.anchor_grad(h, tau)
        np.testing.assert_allclose(g[0], -(2 / tau) * w12 * (h[0] - h[1]), atol=1e-15)
        # descent on anchor 0 moves it away from anchor 1
        assert (h[0] - g[0])[0] < h[0][0]

    def test_anchor_gradient_vs_autodiff(self):
        rng = np.random.default_rng(4)
        h = rng.standard_normal((5, 3))
        ref = dsp.anchor_grad(h, 0.5)
        for i in range(5):
            leaf = Var(h[i], requires_grad=True)
            rows = [leaf if j == i else Var(h[j]) for j in range(5)]
            hv = ad.concat([ad.reshape(r, (1, 3)) for r in rows], axis=0)
            d2 = ad.sum_(ad.square(ad.sub(hv, ad.reshape(leaf, (1, 3)))), axis=1)
            (g,) = ad.grad(ad.logsumexp(ad.mul(d2, -2.0)), [leaf])
            np.testing.assert_allclose(g, ref[i], atol=1e-12)

    def test_weights_are_softmax(self):
        w = dsp.softmax_weights(np.random.default_rng(5).standard_normal((4, 2)))
        np.testing.assert_allclose(w.sum(1), 1.0)
        assert np.all(np.argmax(w, axis=1) == np.arange(4))

    @pytest.mark.parametrize("fn, analytic", [(dsp.disp_l2, dsp.disp_l2_grad_analytic), (dsp.disp_lse, dsp.disp_lse_grad_analytic)])
    def test_full_gradient_vs_autodiff(self, fn, analytic):
        h = np.random.default_rng(6).standard_normal((6, 4))
        leaf = Var(h, requires_grad=True)
        (g,) = ad.grad(fn(leaf), [leaf])
        np.testing.assert_allclose(analytic(h), g, atol=1e-12)

    def test_descent_increases_spread(self):
        h = np.random.default_rng(7).standard_normal((6, 3)) * 0.3
        before = dsp.mean_pairwise_distance(h)
        after = dsp.mean_pairwise_distance(h - 0.05 * dsp.disp_l2_grad_analytic(h))
        assert after > before


def test_pairwise_statistics():
    h = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 4.0]])
    assert dsp.mean_pairwise_distance(h) == pytest.approx((5 + 4 + 3) / 3)
    assert dsp.mean_pairwise_sq_distance(h) == pytest.approx((25 + 16 + 9) / 3)
