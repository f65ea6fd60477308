import numpy as np
import pytest

from rvsl import autograd as ag


def conv2d_loop_oracle(x, w, b=None, stride=1, padding=0):
    """Direct convolution by hand loops; the independent reference."""
    n, cin, h, wdt = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wdt + 2 * padding - k) // stride + 1
    y = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    y[ni, co, i, j] = (patch * w[co]).sum()
            if b is not None:
                y[ni, co] += b[co]
    return y


class TestConvForward:
    def test_identity_kernel(self):
        x = ag.tensor(np.ones((1, 1, 3, 3)))
        w = ag.tensor(np.ones((1, 1, 1, 1)))
        out = ag.conv2d(x, w)
        np.testing.assert_array_equal(out.data, x.data)

    def test_ones_kernel_stride2(self):
        x = ag.tensor(np.ones((1, 1, 4, 4)))
        w = ag.tensor(np.ones((1, 1, 2, 2)))
        out = ag.conv2d(x, w, stride=2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_matches_loop_oracle(self, stride, padding):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, (2, 3, 6, 6))
        w = rng.uniform(-1, 1, (4, 3, 3, 3))
        b = rng.uniform(-1, 1, 4)
        got = ag.conv2d(ag.tensor(x), ag.tensor(w), ag.tensor(b),
                        stride=stride, padding=padding)
        want = conv2d_loop_oracle(x, w, b, stride=stride, padding=padding)
        np.testing.assert_allclose(got.data, want, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        x = ag.tensor(np.ones((1, 2, 4, 4)))
        w = ag.tensor(np.ones((1, 3, 2, 2)))
        with pytest.raises(ag.ShapeError):
            ag.conv2d(x, w)

    def test_nonpositive_stride_rejected(self):
        x = ag.tensor(np.ones((1, 1, 4, 4)))
        w = ag.tensor(np.ones((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            ag.conv2d(x, w, stride=0)


class TestTransposeConv:
    def test_adjoint_identity(self):
        # <conv(x), y> == <x, convT(y)> for matching shapes: the defining property.
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, (2, 3, 8, 8))
        w = rng.uniform(-1, 1, (5, 3, 3, 3))
        y = ag.conv2d(ag.tensor(x), ag.tensor(w), stride=2, padding=1)
        z = rng.uniform(-1, 1, y.data.shape)
        back = ag.conv2d_transpose(ag.tensor(z), ag.tensor(w), stride=2,
                                   padding=1, out_hw=(8, 8))
        lhs = (y.data * z).sum()
        rhs = (x * back.data).sum()
        assert abs(lhs - rhs) < 1e-10

    def test_default_output_shape(self):
        x = ag.tensor(np.zeros((1, 4, 8, 8)))
        w = ag.tensor(np.zeros((4, 2, 2, 2)))
        out = ag.conv2d_transpose(x, w, stride=2)
        assert out.data.shape == (1, 2, 16, 16)


class TestSimpleOps:
    def test_global_avg_pool_constant(self):
        x = ag.tensor(np.full((2, 3, 5, 5), 0.7))
        out = ag.global_avg_pool(x)
        np.testing.assert_allclose(out.data, np.full((2, 3), 0.7))

    def test_channel_min(self):
        x = np.stack([np.full((4, 4), 0.3), np.full((4, 4), 0.1), np.full((4, 4), 0.9)])
        out = ag.channel_min(ag.tensor(x[None]))
        np.testing.assert_allclose(out.data, np.full((1, 4, 4), 0.1))

    def test_window_min_matches_bruteforce(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 1, (1, 7, 7))
        out = ag.window_min(ag.tensor(x), 3)
        want = np.zeros((1, 7, 7))
        for i in range(7):
            for j in range(7):
                want[0, i, j] = x[0, max(0, i - 1):i + 2, max(0, j - 1):j + 2].min()
        np.testing.assert_array_equal(out.data, want)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        x = ag.tensor(rng.normal(size=(4, 7)))
        np.testing.assert_allclose(ag.softmax(x, axis=1).data.sum(axis=1), np.ones(4))

    def test_log_softmax_consistent(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 5))
        np.testing.assert_allclose(ag.log_softmax(ag.tensor(x), axis=1).data,
                                   np.log(ag.softmax(ag.tensor(x), axis=1).data))


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = ag.parameter(np.random.default_rng(0).normal(size=(3, 4)))
        ag.backward(ag.total_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_mean_of_half_scale(self):
        x = ag.parameter(np.random.default_rng(0).normal(size=(2, 5)))
        ag.backward(ag.total_mean(x * 0.5))
        np.testing.assert_allclose(x.grad, np.full((2, 5), 0.5 / 10))

    def test_nonscalar_root_rejected(self):
        x = ag.parameter(np.ones((2, 2)))
        with pytest.raises(ValueError):
            ag.backward(x * 2.0)

    def test_stopgrad_blocks_flow(self):
        x = ag.parameter(np.ones(4))
        y = ag.total_sum(ag.stopgrad(x * 2.0))
        ag.backward(y)
        assert x.grad is None

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(5)
        x = ag.parameter(rng.normal(size=(3, 3)))

        def run(a, b):
            ag.zero_grads([x])
            f = ag.total_mean(ag.sigmoid(x))
            g = ag.total_sum(x * x)
            ag.backward(f * a + g * b)
            return x.grad.copy()

        ga = run(1.0, 0.0)
        gb = run(0.0, 1.0)
        gc = run(2.5, -1.5)
        np.testing.assert_allclose(gc, 2.5 * ga - 1.5 * gb, atol=1e-12)

    def test_diamond_graph_accumulates(self):
        x = ag.parameter(np.array([2.0]))
        y = x * 3.0
        ag.backward(ag.total_sum(y + y))
        np.testing.assert_allclose(x.grad, [6.0])


def _resample_away_from_kinks(rng, shape, build_pre):
    # keep relu/min inputs away from kink points so finite differences are valid
    for _ in range(50):
        x = rng.uniform(-1, 1, shape)
        if np.abs(build_pre(x)).min() > 1e-4:
            return x
    raise AssertionError("could not sample away from kinks")


class TestGradCheck:
    def test_constant_graph_zero_error(self):
        p = ag.parameter(np.ones((2, 2)))

        def build():
            return ag.total_sum(ag.tensor(np.ones(3))) * 2.0

        ok, err = ag.grad_check(build, [p])
        assert ok and err == 0.0

    @pytest.mark.parametrize("op", ["exp", "log", "sigmoid", "sqrt", "abs",
                                    "l2_normalize", "softmax", "log_softmax"])
    def test_elementwise_ops(self, op):
        rng = np.random.default_rng(hash(op) % 2 ** 32)
        x = rng.uniform(0.2, 1.0, (3, 4))
        p = ag.parameter(x)
        fn = {"exp": ag.exp, "log": ag.log, "sigmoid": ag.sigmoid,
              "sqrt": ag.sqrt, "abs": ag.absolute,
              "l2_normalize": lambda t: ag.l2_normalize(t, axis=1),
              "softmax": lambda t: ag.softmax(t, axis=1),
              "log_softmax": lambda t: ag.log_softmax(t, axis=1)}[op]

        def build():
            return ag.total_mean(ag.sigmoid(fn(p)))

        ok, err = ag.grad_check(build, [p])
        assert ok, f"{op}: rel err {err}"

    def test_conv_relu_dense_chain(self):
        rng = np.random.default_rng(11)
        x = ag.tensor(rng.uniform(-1, 1, (2, 2, 6, 6)))
        w1 = ag.parameter(rng.uniform(-0.5, 0.5, (3, 2, 3, 3)))
        b1 = ag.parameter(np.zeros(3))
        w2 = ag.parameter(rng.uniform(-0.5, 0.5, (3, 5)))
        b2 = ag.parameter(np.zeros(5))

        def build():
            h = ag.relu(ag.conv2d(x, w1, b1, stride=2, padding=1))
            z = ag.dense(ag.global_avg_pool(h), w2, b2)
            return ag.total_mean(z * z)

        ok, err = ag.grad_check(build, [w1, b1, w2, b2], tolerance=1e-4)
        assert ok, f"rel err {err}"

    def test_transpose_conv(self):
        rng = np.random.default_rng(12)
        x = ag.tensor(rng.uniform(-1, 1, (1, 3, 4, 4)))
        w = ag.parameter(rng.uniform(-0.5, 0.5, (3, 2, 2, 2)))
        b = ag.parameter(rng.uniform(-0.1, 0.1, 2))

        def build():
            y = ag.conv2d_transpose(x, w, b, stride=2)
            return ag.total_mean(y * y)

        ok, err = ag.grad_check(build, [w, b], tolerance=1e-4)
        assert ok, f"rel err {err}"

    def test_batch_norm_train_mode(self):
        rng = np.random.default_rng(13)
        x = ag.parameter(rng.uniform(-1, 1, (4, 3, 2, 2)))
        gamma = ag.parameter(rng.uniform(0.5, 1.5, 3))
        beta = ag.parameter(rng.uniform(-0.5, 0.5, 3))

        def build():
            rm, rv = np.zeros(3), np.ones(3)
            y = ag.batch_norm(x, gamma, beta, rm, rv, training=True)
            return ag.total_mean(ag.sigmoid(y))

        ok, err = ag.grad_check(build, [x, gamma, beta], tolerance=1e-4)
        assert ok, f"rel err {err}"

    def test_batch_norm_eval_mode(self):
        rng = np.random.default_rng(14)
        x = ag.parameter(rng.uniform(-1, 1, (4, 3)))
        gamma = ag.parameter(np.ones(3))
        beta = ag.parameter(np.zeros(3))
        rm, rv = rng.uniform(-0.2, 0.2, 3), rng.uniform(0.5, 1.5, 3)

        def build():
            y = ag.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training=False)
            return ag.total_mean(y * y)

        ok, err = ag.grad_check(build, [x, gamma, beta], tolerance=1e-4)
        assert ok, f"rel err {err}"

    def test_min_reduce_chain(self):
        rng = np.random.default_rng(15)
        x = rng.uniform(0, 1, (1, 3, 5, 5))
        # keep channel gaps away from ties
        x[:, 1] += 0.01
        x[:, 2] += 0.02
        p = ag.parameter(x)

        def build():
            dc = ag.window_min(ag.channel_min(p), 3)
            return ag.total_mean(dc)

        ok, err = ag.grad_check(build, [p], tolerance=1e-4)
        assert ok, f"rel err {err}"

    def test_determinism(self):
        rng = np.random.default_rng(16)
        x = rng.uniform(-1, 1, (2, 2, 4, 4))
        w = rng.uniform(-0.5, 0.5, (2, 2, 3, 3))

        def run():
            xp, wp = ag.tensor(x), ag.parameter(w.copy())
            loss = ag.total_mean(ag.relu(ag.conv2d(xp, wp, padding=1)))
            ag.backward(loss)
            return loss.data.copy(), wp.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert np.array_equal(l1, l2) and np.array_equal(g1, g2)
