import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from condattn import autodiff as ad
from condattn.autodiff import ContractError, Graph, ShapeError, Tensor


def conv_loop(x, k, b=None, stride=1, pad=0):
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for y in range(ho):
                for xx in range(wo):
                    patch = xp[ni, :, y * stride : y * stride + kh, xx * stride : xx * stride + kw]
                    out[ni, oi, y, xx] = (patch * k[oi]).sum() + (0.0 if b is None else b[oi])
    return out


def pool_loop(x, k=2):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // k, w // k))
    for y in range(h // k):
        for xx in range(w // k):
            out[:, :, y, xx] = x[:, :, y * k : y * k + k, xx * k : xx * k + k].max(axis=(2, 3))
    return out


finite = st.floats(-10, 10, allow_nan=False, width=64)


class TestForward:
    def test_conv_matches_loop(self, rng):
        x, k, b = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
        np.testing.assert_allclose(ad.conv2d(x, k, b, pad=1).data, conv_loop(x, k, b, pad=1), atol=1e-12)

    def test_conv_stride_matches_loop(self, rng):
        x, k = rng.standard_normal((1, 2, 7, 7)), rng.standard_normal((3, 2, 3, 3))
        np.testing.assert_allclose(ad.conv2d(x, k, stride=2).data, conv_loop(x, k, stride=2), atol=1e-12)

    def test_conv_unbatched(self, rng):
        x, k = rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
        assert np.array_equal(ad.conv2d(x, k, pad=1).data, ad.conv2d(x[None], k, pad=1).data[0])

    def test_conv_rejects_bad_shapes(self, rng):
        with pytest.raises(ShapeError):
            ad.conv2d(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 4, 3, 3)))
        with pytest.raises(ShapeError):
            ad.conv2d(rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3)), stride=2)

    def test_maxpool_matches_loop(self, rng):
        x = rng.standard_normal((2, 3, 6, 4))
        np.testing.assert_array_equal(ad.maxpool2d(x, 2).data, pool_loop(x))

    def test_maxpool_requires_tiling(self, rng):
        with pytest.raises(ShapeError):
            ad.maxpool2d(rng.standard_normal((1, 1, 5, 4)), 2)

    def test_maxpool_tie_goes_to_first(self):
        g = Graph()
        x = g.leaf(np.ones((1, 1, 2, 2)))
        grads = g.backward(ad.reduce(ad.maxpool2d(x, 2), "sum"))
        np.testing.assert_array_equal(grads[x][0, 0], [[1, 0], [0, 0]])

    def test_softmax_shift_invariant(self, rng):
        x = rng.standard_normal((3, 5))
        np.testing.assert_allclose(ad.softmax(x).data, ad.softmax(x + 800.0).data, atol=1e-15)

    def test_log_clamp(self):
        out = ad.log(np.array([0.0, 1.0]), clamp=1e-12).data
        assert out[0] == np.log(1e-12) and out[1] == 0.0

    def test_batchnorm_train_updates_running(self, rng):
        x = rng.standard_normal((8, 2, 3, 3)) * 2 + 1
        running = {"mean": np.zeros(2), "var": np.ones(2)}
        out = ad.batchnorm(x, np.ones(2), np.zeros(2), running, train=True).data
        mean, var = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
        np.testing.assert_allclose(running["mean"], 0.1 * mean)
        np.testing.assert_allclose(running["var"], 0.9 + 0.1 * var)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)

    def test_batchnorm_eval_uses_running(self, rng):
        x = rng.standard_normal((4, 3))
        running = {"mean": np.array([1.0, 0.0, -1.0]), "var": np.array([4.0, 1.0, 0.25])}
        out = ad.batchnorm(x, np.ones(3), np.zeros(3), running, train=False).data
        np.testing.assert_allclose(out, (x - running["mean"]) / np.sqrt(running["var"] + 1e-5))

    def test_dropout_identity_in_eval(self, rng):
        x = Tensor(rng.standard_normal(10))
        assert ad.dropout(x, 0.5, rng, train=False) is x

    def test_dropout_inverted_scale(self):
        x = np.ones(200_000)
        out = ad.dropout(x, 0.4, np.random.default_rng(0), train=True).data
        assert set(np.unique(out)) <= {0.0, 1 / 0.6}
        assert abs(out.mean() - 1.0) < 0.01

    def test_take_rows_range_checked(self):
        with pytest.raises(IndexError):
            ad.take_rows(np.zeros((3, 2)), [0, 3])


class TestBackward:
    def test_non_scalar_loss_rejected(self):
        g = Graph()
        x = g.leaf(np.ones(3))
        with pytest.raises(ContractError):
            g.backward(x * 2.0)

    def test_foreign_loss_rejected(self):
        g1, g2 = Graph(), Graph()
        y = ad.reduce(g2.leaf(np.ones(2)), "sum")
        with pytest.raises(ContractError):
            g1.backward(y)

    def test_unreached_leaf_gets_zeros(self):
        g = Graph()
        a, b = g.leaf(np.ones(2)), g.leaf(np.ones((2, 3)))
        grads = g.backward(ad.reduce(a * 3.0, "sum"))
        np.testing.assert_array_equal(grads[b], np.zeros((2, 3)))
        np.testing.assert_array_equal(grads[a], [3.0, 3.0])

    def test_fan_out_accumulates(self):
        g = Graph()
        x = g.leaf(np.array(2.0))
        y = x * x + x  # dy/dx = 2x + 1
        assert g.backward(y)[x] == 5.0

    def test_broadcast_grad_sums(self):
        g = Graph()
        a, b = g.leaf(np.ones((4, 3))), g.leaf(np.ones(3))
        grads = g.backward(ad.reduce(a + b, "sum"))
        np.testing.assert_array_equal(grads[b], [4.0, 4.0, 4.0])

    def test_fancy_getitem_accumulates(self):
        g = Graph()
        x = g.leaf(np.arange(3.0))
        grads = g.backward(ad.reduce(x[np.array([0, 0, 2])], "sum"))
        np.testing.assert_array_equal(grads[x], [2.0, 0.0, 1.0])

    def test_constant_conv_input_skips_grad(self, rng):
        g = Graph()
        k = g.leaf(rng.standard_normal((2, 1, 3, 3)))
        out = ad.conv2d(rng.standard_normal((1, 1, 4, 4)), k, pad=1)
        grads = g.backward(ad.reduce(out, "sum"))
        assert grads[k].shape == (2, 1, 3, 3)

    def test_gradients_keyed_by_tensor_or_id(self):
        g = Graph()
        x = g.leaf(np.ones(2))
        grads = g.backward(ad.reduce(x, "sum"))
        assert np.array_equal(grads[x], grads[x.node_id])
        assert x in grads and len(grads) == 1


class TestProperties:
    @given(arrays(np.float64, (3, 4), elements=finite))
    def test_softmax_rows_sum_to_one(self, x):
        p = ad.softmax(x, axis=-1).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        assert (p >= 0).all()

    @given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3,), elements=finite))
    def test_add_grads_match_shapes(self, a, b):
        g = Graph()
        ta, tb = g.leaf(a), g.leaf(b)
        grads = g.backward(ad.reduce(ta * tb + tb, "sum"))
        np.testing.assert_allclose(grads[ta], np.broadcast_to(b, (2, 3)))
        np.testing.assert_allclose(grads[tb], a.sum(axis=0) + 2.0)

    @settings(max_examples=25)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.integers(0, 1))
    def test_conv_linear_in_kernel(self, c, o, hw, pad):
        r = np.random.default_rng(c * 100 + o * 10 + hw)
        x = r.standard_normal((1, c, hw, hw))
        k1, k2 = r.standard_normal((o, c, 3, 3)), r.standard_normal((o, c, 3, 3))
        lhs = ad.conv2d(x, k1 + 2 * k2, pad=pad).data
        rhs = ad.conv2d(x, k1, pad=pad).data + 2 * ad.conv2d(x, k2, pad=pad).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestWorkedExamples:
    def test_matmul_identity_and_forced(self, rng):
        b = rng.standard_normal((3, 2))
        assert np.array_equal(ad.matmul(np.eye(3), b).data, b)
        np.testing.assert_array_equal(ad.matmul(np.array([[1.0, 2], [3, 4]]), np.array([[5.0], [6]])).data,
                                      [[17], [39]])

    def test_matmul_loop_oracle(self, rng):
        a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
        loop = np.array([[sum(a[i, k] * b[k, j] for k in range(5)) for j in range(3)] for i in range(4)])
        np.testing.assert_allclose(ad.matmul(a, b).data, loop, atol=1e-12)

    def test_conv_identity_kernel(self, rng):
        x = rng.standard_normal((2, 5, 5))
        np.testing.assert_array_equal(ad.conv2d(x[:1], np.ones((1, 1, 1, 1))).data, x[:1])

    def test_conv_all_ones(self):
        out = ad.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), pad=1).data[0]
        np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_conv_six_loop_oracle(self, rng):
        x, k, b = rng.standard_normal((2, 8, 8)), rng.standard_normal((4, 2, 3, 3)), rng.standard_normal(4)
        np.testing.assert_allclose(ad.conv2d(x, k, b, pad=1).data, conv_loop(x[None], k, b, pad=1)[0], atol=1e-12)

    def test_maxpool_forced_and_constant(self):
        assert ad.maxpool2d(np.array([[[1.0, 2], [3, 4]]]), 2).data.tolist() == [[[4.0]]]
        np.testing.assert_array_equal(ad.maxpool2d(np.full((1, 4, 4), 2.5), 2).data, np.full((1, 2, 2), 2.5))

    def test_maxpool_gradient_mass(self, rng):
        g = Graph()
        x = g.leaf(rng.standard_normal((3, 8, 8)))
        grads = g.backward(ad.reduce(ad.maxpool2d(x, 2), "sum"))
        assert grads[x].sum() == 3 * 4 * 4
        np.testing.assert_array_equal(ad.maxpool2d(x.data, 2).data, pool_loop(x.data[None])[0])

    def test_activation_values(self):
        np.testing.assert_array_equal(ad.relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])
        assert ad.sigmoid(np.array(0.0)).data == 0.5

    def test_tanh_finite_difference(self, rng):
        x = rng.standard_normal(6)
        g = Graph()
        t = g.leaf(x)
        analytic = g.backward(ad.reduce(ad.tanh(t), "sum"))[t]
        h = 1e-5
        numeric = (np.tanh(x + h) - np.tanh(x - h)) / (2 * h)
        np.testing.assert_allclose(analytic, numeric, atol=1e-6)

    def test_softmax_examples(self):
        np.testing.assert_allclose(ad.softmax(np.zeros(3)).data, [1 / 3] * 3)
        np.testing.assert_allclose(ad.softmax(np.array([0.0, np.log(3.0)])).data, [0.25, 0.75])

    def test_concat_examples(self, rng):
        one = Tensor(rng.standard_normal(3))
        np.testing.assert_array_equal(ad.concat([one]).data, one.data)
        np.testing.assert_array_equal(ad.concat([np.array([1.0, 2]), np.array([3.0])]).data, [1, 2, 3])
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 4))
        out = ad.concat([a, b], axis=1).data
        assert np.array_equal(out[:, :3], a) and np.array_equal(out[:, 3:], b)

    def test_reduce_examples(self, rng):
        assert ad.reduce(np.ones((2, 3)), "sum").data == 6
        assert ad.reduce(np.full((4, 2), 1.5), "mean").data == 1.5
        x = rng.standard_normal((3, 4))
        loop = [sum(x[i, j] for i in range(3)) for j in range(4)]
        np.testing.assert_allclose(ad.reduce(x, "sum", axis=0).data, loop, atol=1e-12)

    def test_backward_examples(self):
        g = Graph()
        x = g.leaf(np.arange(4.0))
        np.testing.assert_array_equal(g.backward(ad.reduce(x, "sum"))[x], np.ones(4))
        g = Graph()
        a, b = g.leaf(np.array(3.0)), g.leaf(np.array(-2.0))
        grads = g.backward(a * b)
        assert grads[a] == -2.0 and grads[b] == 3.0

    def test_topological_ids(self, rng):
        g = Graph()
        x = g.leaf(rng.standard_normal((2, 2)))
        ad.reduce(ad.softmax(x @ x) * x, "sum")
        assert all(all(p < k for p in node.parents) for k, node in enumerate(g.nodes))

    def test_debug_mode_flags_nonfinite(self, monkeypatch):
        monkeypatch.setattr(ad, "DEBUG", True)
        with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
            ad.log(np.array([-1.0]))
