import math

import numpy as np
import pytest

from nlccam import nonlocal_block as nlb
from nlccam.tensor_core import DimensionError


def random_params(rng, c, reduction=2, zero_norm=False):
    p = nlb.NonLocalParams.init(c, reduction, rng)
    if not zero_norm:
        p.gamma = rng.normal(size=c)
        p.beta = rng.normal(size=c)
    return p


def central_difference(fn, arr, step=1e-5):
    out = np.zeros_like(arr)
    flat, out_flat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        out_flat[i] = (up - down) / (2 * step)
    return out


class TestParams:
    def test_zero_init_norm(self):
        p = nlb.NonLocalParams.init(16, 8, 0)
        assert p.reduced == 2
        assert not p.gamma.any() and not p.beta.any()

    def test_reduction_floor_is_one(self):
        assert nlb.NonLocalParams.init(3, 8, 0).reduced == 1

    def test_shape_validation(self):
        p = nlb.NonLocalParams.init(4, 2, 0)
        with pytest.raises(DimensionError):
            nlb.NonLocalParams(p.Wf, p.Wg, p.Wh, np.zeros((3, 3)), p.gamma, p.beta)


class TestAttention:
    def test_zero_projections_give_uniform(self):
        p = nlb.NonLocalParams.init(4, 2, 0)
        p.Wf[:] = 0
        p.Wg[:] = 0
        alpha = nlb.attention_matrix(np.random.default_rng(0).normal(size=(4, 3, 3)), p)
        np.testing.assert_allclose(alpha, np.full((9, 9), 1 / 9), atol=1e-15)

    def test_columns_sum_to_one(self):
        rng = np.random.default_rng(1)
        p = random_params(rng, 6)
        alpha = nlb.attention_matrix(rng.normal(size=(6, 4, 5)) * 3, p)
        assert np.abs(alpha.sum(axis=0) - 1).max() <= 1e-12

    def test_single_location(self):
        p = nlb.NonLocalParams.init(4, 2, 0)
        assert nlb.attention_matrix(np.ones((4, 1, 1)), p).tolist() == [[1.0]]

    def test_column_matches_softmax_of_scores(self):
        rng = np.random.default_rng(2)
        p = random_params(rng, 4)
        x = rng.normal(size=(4, 2, 3))
        xf = x.reshape(4, -1)
        f, g = p.Wf @ xf, p.Wg @ xf
        alpha = nlb.attention_matrix(x, p)
        for j in range(6):
            scores = [float(f[:, i] @ g[:, j]) for i in range(6)]
            z = sum(math.exp(s) for s in scores)
            np.testing.assert_allclose(alpha[:, j], [math.exp(s) / z for s in scores], atol=1e-14)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            nlb.attention_matrix(np.ones((3, 2, 2)), nlb.NonLocalParams.init(4, 2, 0))


class TestForward:
    def test_identity_at_init(self):
        rng = np.random.default_rng(3)
        p = nlb.NonLocalParams.init(8, 4, rng)
        x = rng.normal(size=(8, 5, 5))
        y, _ = nlb.nl_forward(x, p)
        assert np.abs(y - x).max() <= 1e-12

    def test_hand_evaluation_single_location(self):
        p = nlb.NonLocalParams(
            Wf=np.array([[0.3, -0.2]]),
            Wg=np.array([[1.0, 0.5]]),
            Wh=np.eye(2),
            Wk=np.eye(2),
            gamma=np.array([2.0, 3.0]),
            beta=np.array([0.5, -1.0]),
        )
        y, cache = nlb.nl_forward(np.array([[[1.0]], [[2.0]]]), p)
        # alpha = [[1]], u = x = (1, 2): mean 1.5, variance 0.25
        s = math.sqrt(0.25 + 1e-5)
        expected = [2.0 * (-0.5 / s) + 0.5 + 1.0, 3.0 * (0.5 / s) - 1.0 + 2.0]
        np.testing.assert_allclose(y.reshape(-1), expected, atol=1e-14)
        assert cache.alpha[0].tolist() == [[1.0]]

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        p = random_params(rng, 4)
        x = rng.normal(size=(4, 3, 4))
        perm = rng.permutation(12)
        y, _ = nlb.nl_forward(x, p)
        yp, _ = nlb.nl_forward(x.reshape(4, -1)[:, perm].reshape(4, 3, 4), p)
        np.testing.assert_allclose(yp.reshape(4, -1), y.reshape(4, -1)[:, perm], atol=1e-10)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        p = random_params(rng, 4)
        xs = rng.normal(size=(3, 4, 2, 3))
        yb, _ = nlb.forward_batch(xs, p)
        for x, y in zip(xs, yb):
            np.testing.assert_allclose(nlb.nl_forward(x, p)[0], y, atol=1e-14)


class TestBackward:
    @pytest.mark.parametrize("zero_norm", [False, True])
    def test_matches_central_differences(self, zero_norm):
        rng = np.random.default_rng(6)
        p = random_params(rng, 4, reduction=2, zero_norm=zero_norm)
        x = rng.normal(size=(4, 5, 5))
        dy = rng.normal(size=(4, 5, 5))
        _, cache = nlb.nl_forward(x, p)
        dx, grads = nlb.nl_backward(cache, dy)

        def loss():
            return float((nlb.nl_forward(x, p)[0] * dy).sum())

        for name, arr in [("x", x)] + p.items():
            numeric = central_difference(loss, arr)
            analytic = dx if name == "x" else getattr(grads, name)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
            assert (np.abs(analytic - numeric) / denom).max() <= 1e-4, name

    def test_zero_norm_passes_gradient_straight_through(self):
        rng = np.random.default_rng(7)
        p = random_params(rng, 4, zero_norm=True)
        x, dy = rng.normal(size=(2, 4, 3, 3))
        _, cache = nlb.nl_forward(x, p)
        dx, grads = nlb.nl_backward(cache, dy)
        np.testing.assert_array_equal(dx, dy)
        assert not grads.Wf.any() and not grads.Wk.any()
        assert np.abs(grads.gamma).max() > 0

    def test_zero_upstream(self):
        rng = np.random.default_rng(8)
        p = random_params(rng, 4)
        _, cache = nlb.nl_forward(rng.normal(size=(4, 3, 3)), p)
        dx, grads = nlb.nl_backward(cache, np.zeros((4, 3, 3)))
        assert not dx.any()
        assert all(not g.any() for _, g in grads.items())

    def test_shape_mismatch(self):
        rng = np.random.default_rng(9)
        p = random_params(rng, 4)
        _, cache = nlb.nl_forward(rng.normal(size=(4, 3, 3)), p)
        with pytest.raises(DimensionError):
            nlb.nl_backward(cache, np.zeros((4, 2, 3)))
