import numpy as np
import pytest

from ppc import autodiff as ad
from ppc.autodiff import Tape, Tensor, backward

from gradcheck import check_gradients, leaf


class TestForwardExamples:
    def test_relu_definition(self):
        out = ad.relu(leaf([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 3))
        out = ad.matmul(leaf(np.eye(3)), leaf(a))
        np.testing.assert_allclose(out.data, a)

    def test_conv1d_same_padding_hand_oracle(self):
        # sliding-window sum of [1,2,3,4] with kernel [1,1,1], zero padding:
        # [0+1+2, 1+2+3, 2+3+4, 3+4+0]
        x = leaf(np.array([[[1.0, 2.0, 3.0, 4.0]]]))
        w = leaf(np.array([[[1.0, 1.0, 1.0]]]))
        out = ad.conv1d(x, w)
        np.testing.assert_allclose(out.data[0, 0], [3.0, 6.0, 9.0, 7.0])

    def test_shape_error_names_op(self):
        with pytest.raises(ad.ShapeError, match="matmul"):
            ad.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))

    def test_non_finite_is_numeric_error(self):
        with pytest.raises(ad.NumericError, match="log"):
            ad.log(leaf([-1.0]))


class TestBackwardExamples:
    def test_sum_of_squares(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            loss = ad.reduce_sum(ad.square(x))
        backward(tape, loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_constant_loss_yields_no_gradients(self):
        x = leaf([1.0, 2.0])
        c = Tensor(np.float64(3.0), dtype=np.float64)
        with Tape() as tape:
            ad.square(x)  # tape non-empty, but loss does not depend on it
        backward(tape, c)
        assert x.grad is None

    def test_loss_must_be_scalar(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            y = ad.square(x)
        with pytest.raises(ad.ShapeError):
            backward(tape, y)

    def test_empty_tape_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            backward(Tape(), Tensor(np.float64(1.0)))

    def test_repeated_backward_accumulates(self):
        x = leaf([3.0])
        with Tape() as tape:
            loss = ad.reduce_sum(ad.square(x))
        backward(tape, loss)
        backward(tape, loss)
        np.testing.assert_allclose(x.grad, [12.0])


class TestGradientChecks:
    """Analytic vs central finite differences for every op kind."""

    rng = np.random.default_rng(42)

    def rand(self, *shape):
        return leaf(self.rng.normal(size=shape))

    def test_add(self):
        check_gradients(lambda a, b: ad.reduce_sum(ad.add(a, b)), [self.rand(3, 4), self.rand(3, 4)])

    def test_add_broadcast(self):
        check_gradients(lambda a, b: ad.reduce_sum(ad.square(ad.add(a, b))), [self.rand(3, 4), self.rand(4)])

    def test_sub(self):
        check_gradients(lambda a, b: ad.reduce_sum(ad.square(ad.sub(a, b))), [self.rand(2, 5), self.rand(2, 5)])

    def test_mul(self):
        check_gradients(lambda a, b: ad.reduce_sum(ad.mul(a, b)), [self.rand(4, 3), self.rand(4, 3)])

    def test_matmul(self):
        check_gradients(lambda a, b: ad.reduce_sum(ad.square(ad.matmul(a, b))), [self.rand(3, 4), self.rand(4, 2)])

    def test_relu(self):
        x = self.rand(4, 4)
        x.data += 0.05 * np.sign(x.data)  # keep away from the kink
        check_gradients(lambda t: ad.reduce_sum(ad.square(ad.relu(t))), [x])

    def test_sigmoid(self):
        check_gradients(lambda t: ad.reduce_sum(ad.square(ad.sigmoid(t))), [self.rand(5)])

    def test_tanh(self):
        check_gradients(lambda t: ad.reduce_sum(ad.square(ad.tanh(t))), [self.rand(5)])

    def test_exp(self):
        check_gradients(lambda t: ad.reduce_sum(ad.exp(t)), [self.rand(4)])

    def test_log(self):
        x = leaf(np.abs(self.rng.normal(size=5)) + 0.5)
        check_gradients(lambda t: ad.reduce_sum(ad.log(t)), [x])

    def test_square(self):
        check_gradients(lambda t: ad.reduce_sum(ad.square(t)), [self.rand(3, 3)])

    def test_reduce_sum_axis(self):
        check_gradients(lambda t: ad.reduce_sum(ad.square(ad.reduce_sum(t, axis=1))), [self.rand(3, 4)])

    def test_reduce_mean(self):
        check_gradients(lambda t: ad.reduce_mean(ad.square(t)), [self.rand(3, 4)])

    def test_reduce_mean_axis(self):
        check_gradients(lambda t: ad.reduce_sum(ad.square(ad.reduce_mean(t, axis=0))), [self.rand(4, 3)])

    def test_concat(self):
        check_gradients(
            lambda a, b: ad.reduce_sum(ad.square(ad.concat([a, b], axis=1))),
            [self.rand(2, 3), self.rand(2, 2)],
        )

    def test_slice(self):
        check_gradients(lambda t: ad.reduce_sum(ad.square(ad.slice_(t, 1, 1, 4))), [self.rand(2, 5)])

    def test_reshape(self):
        check_gradients(lambda t: ad.reduce_sum(ad.square(ad.reshape(t, (4, 3)))), [self.rand(3, 4)])

    def test_conv1d(self):
        check_gradients(
            lambda x, w: ad.reduce_sum(ad.square(ad.conv1d(x, w))),
            [self.rand(2, 3, 5), self.rand(4, 3, 3)],
        )

    def test_maxpool1d(self):
        check_gradients(lambda t: ad.reduce_sum(ad.square(ad.maxpool1d(t, 2))), [self.rand(2, 3, 4)])

    def test_nearest_upsample1d(self):
        check_gradients(lambda t: ad.reduce_sum(ad.square(ad.nearest_upsample1d(t, 3))), [self.rand(2, 2, 3)])

    def test_batchnorm_train(self):
        def fn(x, g, b):
            out, _, _ = ad.batchnorm(x, g, b, training=True)
            return ad.reduce_sum(ad.square(out))

        check_gradients(fn, [self.rand(3, 2, 4), self.rand(2), self.rand(2)])

    def test_batchnorm_inference(self):
        rm = np.array([0.1, -0.2])
        rv = np.array([1.5, 0.7])

        def fn(x, g, b):
            out = ad.batchnorm(x, g, b, training=False, running_mean=rm, running_var=rv)
            return ad.reduce_sum(ad.square(out))

        check_gradients(fn, [self.rand(3, 2, 4), self.rand(2), self.rand(2)])

    def test_composed_graph(self):
        def fn(x, w1, w2):
            h = ad.tanh(ad.matmul(x, w1))
            y = ad.sigmoid(ad.matmul(h, w2))
            return ad.reduce_mean(ad.square(y))

        check_gradients(fn, [self.rand(4, 3), self.rand(3, 5), self.rand(5, 2)])


class TestProperties:
    def test_backward_linearity(self):
        rng = np.random.default_rng(7)
        x = leaf(rng.normal(size=(3, 3)))
        a, b = 1.7, -0.4

        def f(t):
            return ad.reduce_sum(ad.square(t))

        def g(t):
            return ad.reduce_sum(ad.exp(t))

        with Tape() as tape:
            loss = ad.add(
                ad.mul(Tensor(np.float64(a)), f(x)),
                ad.mul(Tensor(np.float64(b)), g(x)),
            )
        backward(tape, loss)
        combined = x.grad.copy()

        x.zero_grad()
        with Tape() as tape:
            backward(tape, f(x))
        gf = x.grad.copy()
        x.zero_grad()
        with Tape() as tape:
            backward(tape, g(x))
        gg = x.grad.copy()
        np.testing.assert_allclose(combined, a * gf + b * gg, atol=1e-10)

    def test_determinism_bit_identical(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(4, 3, 8)).astype(np.float32)
        w = rng.normal(size=(2, 3, 3)).astype(np.float32)

        def run():
            out = ad.conv1d(Tensor(x), Tensor(w))
            out = ad.maxpool1d(ad.relu(out), 2)
            return ad.reduce_mean(ad.square(out)).data.tobytes()

        assert run() == run()

    def test_op_forward_dispatch(self):
        tape = Tape()
        x = leaf([[1.0, -2.0, 3.0]])
        out = ad.op_forward(tape, "relu", [x])
        np.testing.assert_array_equal(out.data, [[1.0, 0.0, 3.0]])
        assert len(tape) == 1
        loss = ad.op_forward(tape, "reduce_sum", [out])
        backward(tape, loss)
        np.testing.assert_allclose(x.grad, [[1.0, 0.0, 1.0]])

    def test_op_forward_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown"):
            ad.op_forward(Tape(), "fft", [leaf([1.0])])
