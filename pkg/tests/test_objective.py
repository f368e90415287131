import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condattn import autodiff as ad
from condattn.autodiff import ContractError, ShapeError
from condattn.objective import LossBatch, double_stochastic, one_hot_targets, sequence_xent, total_loss


def xent_loop(probs, targets):
    n, t, _ = probs.shape
    total = 0.0
    for i in range(n):
        for j in range(t):
            if targets[i, j] >= 0:
                total -= np.log(max(probs[i, j, targets[i, j]], 1e-12))
    return total / (n * t)


def j2_loop(alphas, lam):
    k, l = alphas.shape
    return lam * sum((1 - sum(alphas[t, i] for t in range(k))) ** 2 for i in range(l))


class TestSequenceXent:
    def test_uniform_is_log_k(self):
        probs = np.full((3, 5, 11), 1 / 11)
        out = sequence_xent(LossBatch(probs, np.zeros((3, 5), dtype=int))).data
        assert abs(out - np.log(11)) < 1e-12
        assert abs(out - 2.3979) < 1e-4

    def test_perfect_predictions(self):
        targets = np.array([[1, 0, 2]])
        probs = np.eye(3)[targets]
        assert sequence_xent(LossBatch(probs, targets)).data == pytest.approx(0.0, abs=1e-12)

    def test_loop_oracle(self, rng):
        probs = rng.dirichlet(np.ones(7), size=(4, 5))
        targets = rng.integers(-1, 7, (4, 5))
        out = sequence_xent(LossBatch(probs, targets)).data
        assert abs(out - xent_loop(probs, targets)) <= 1e-12

    def test_clamp_keeps_zero_probability_finite(self):
        probs = np.array([[[1.0, 0.0]]])
        assert sequence_xent(LossBatch(probs, np.array([[1]]))).data == pytest.approx(-np.log(1e-12))

    def test_one_hot_targets_accepted(self, rng):
        probs = rng.dirichlet(np.ones(4), size=(2, 3))
        ids = rng.integers(0, 4, (2, 3))
        a = sequence_xent(LossBatch(probs, ids)).data
        b = sequence_xent(LossBatch(probs, np.eye(4)[ids])).data
        assert a == b

    def test_shape_errors(self, rng):
        with pytest.raises(ShapeError):
            sequence_xent(LossBatch(rng.dirichlet(np.ones(4), size=3), np.zeros(3, dtype=int)))
        with pytest.raises(ShapeError):
            one_hot_targets(np.array([[5]]), 4)


class TestDoubleStochastic:
    def test_permutation_is_zero(self, rng):
        perm = np.eye(4)[rng.permutation(4)]
        assert double_stochastic(perm, 1.0).data == 0.0

    def test_uniform_single_step(self):
        assert abs(double_stochastic(np.full((1, 4), 0.25), 1.0).data - 2.25) <= 1e-12

    def test_linear_in_lambda(self, rng):
        a = rng.dirichlet(np.ones(6), size=3)
        assert double_stochastic(a, 2.0).data == pytest.approx(2 * double_stochastic(a, 1.0).data, rel=1e-15)

    def test_loop_oracle_and_batch_mean(self, rng):
        a = rng.dirichlet(np.ones(5), size=(3, 4))
        expect = np.mean([j2_loop(a[n], 0.7) for n in range(3)])
        assert abs(double_stochastic(a, 0.7).data - expect) <= 1e-12

    def test_mask_drops_padded_steps(self, rng):
        a = rng.dirichlet(np.ones(5), size=(2, 4))
        mask = np.array([[1, 1, 0, 0], [1, 1, 1, 1]], dtype=float)
        expect = (j2_loop(a[0, :2], 1.0) + j2_loop(a[1], 1.0)) / 2
        assert abs(double_stochastic(a, 1.0, mask).data - expect) <= 1e-12

    def test_mask_shape_checked(self, rng):
        with pytest.raises(ShapeError):
            double_stochastic(rng.dirichlet(np.ones(5), size=(2, 4)), 1.0, np.ones((2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31))
    def test_nonnegative(self, k, l, seed):
        a = np.random.default_rng(seed).dirichlet(np.ones(l), size=k)
        assert double_stochastic(a, 1.0).data >= 0.0


class TestTotalLoss:
    def test_recognition_is_xent(self, rng):
        probs = rng.dirichlet(np.ones(11), size=(2, 5))
        targets = rng.integers(0, 11, (2, 5))
        batch = LossBatch(probs, targets)
        assert total_loss(batch).data == sequence_xent(batch).data

    def test_caption_needs_alphas(self, rng):
        with pytest.raises(ContractError):
            total_loss(LossBatch(rng.dirichlet(np.ones(4), size=(1, 2)), np.zeros((1, 2), int), task="caption"))

    def test_lambda_zero_is_xent(self, rng):
        probs = rng.dirichlet(np.ones(4), size=(2, 3))
        targets = rng.integers(0, 4, (2, 3))
        alphas = rng.dirichlet(np.ones(5), size=(2, 3))
        batch = LossBatch(probs, targets, alphas, lam=0.0, task="caption")
        assert total_loss(batch).data == sequence_xent(batch).data

    def test_composition(self, rng):
        probs = rng.dirichlet(np.ones(4), size=(2, 3))
        targets = np.array([[2, 1, -1], [3, 3, 1]])
        mask = (targets >= 0).astype(float)
        alphas = [rng.dirichlet(np.ones(9), size=(2, 3)), rng.dirichlet(np.ones(4), size=(2, 3))]
        batch = LossBatch(probs, targets, alphas, lam=1.0, task="caption")
        parts = sequence_xent(batch).data + sum(double_stochastic(a, 1.0, mask).data for a in alphas)
        assert abs(total_loss(batch, mask).data - parts) <= 1e-12

    def test_gradient_flows_to_alphas(self, rng):
        g = ad.Graph()
        s = g.leaf(rng.standard_normal((1, 2, 3)))
        batch = LossBatch(rng.dirichlet(np.ones(4), size=(1, 2)), np.array([[0, 1]]), ad.softmax(s), task="caption")
        assert np.abs(g.backward(total_loss(batch))[s]).sum() > 0
