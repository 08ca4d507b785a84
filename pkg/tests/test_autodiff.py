"""Tensor library tests: exact values from the contract, finite-difference
gradient checks for every registered op, and tape behavior properties."""

import numpy as np
import pytest

from patchjack import autodiff as ad

from conftest import check_gradients, numerical_gradient, relative_error


class TestElementwise:
    def test_tanh_at_origin(self):
        assert ad.tanh(ad.tensor([0.0])).data[0] == 0.0

    def test_sigmoid_at_origin(self):
        assert ad.sigmoid(ad.tensor([0.0])).data[0] == 0.5

    def test_clip_saturates_bounds(self):
        out = ad.clip(ad.tensor([1.5, -1.2]), -0.9, 0.9)
        np.testing.assert_allclose(out.data, [0.9, -0.9])

    def test_binary_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.add(ad.tensor([1.0, 2.0]), ad.tensor([1.0, 2.0, 3.0]))

    def test_scalar_broadcast(self):
        out = ad.mul(ad.tensor([[1.0, 2.0], [3.0, 4.0]]), ad.tensor(2.0))
        np.testing.assert_allclose(out.data, [[2, 4], [6, 8]])

    def test_log_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            ad.log(ad.tensor([1.0, 0.0]))

    def test_clip_gradient_zero_outside(self):
        x = ad.tensor([2.0, 0.5, -2.0], requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.reduce_sum(ad.clip(x, -1.0, 1.0))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0])


class TestMatmul:
    def test_identity(self):
        a = ad.tensor(np.eye(2))
        b = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_allclose(ad.matmul(a, b).data, b.data)

    def test_hand_product(self):
        out = ad.matmul(ad.tensor([[1.0, 2.0]]), ad.tensor([[3.0], [4.0]]))
        np.testing.assert_allclose(out.data, [[11.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))

    def test_gradient_matches_finite_differences(self, rng):
        a = rng.standard_normal((3, 4)).astype(np.float32)
        b = rng.standard_normal((4, 2)).astype(np.float32)
        check_gradients(ad.matmul, [a, b])


class TestConv2d:
    def test_ones_window_sum(self):
        x = ad.tensor(np.ones((1, 3, 3)))
        k = ad.tensor(np.ones((1, 1, 2, 2)))
        out = ad.conv2d(x, k, stride=1)
        assert out.data.shape == (1, 2, 2)
        np.testing.assert_allclose(out.data, 4.0)

    def test_delta_kernel_identity_crop(self, rng):
        x = rng.random((1, 5, 5)).astype(np.float32)
        k = np.zeros((1, 1, 2, 2), dtype=np.float32)
        k[0, 0, 0, 0] = 1.0
        out = ad.conv2d(ad.tensor(x), ad.tensor(k), stride=1)
        np.testing.assert_allclose(out.data[0], x[0, :4, :4])

    def test_kernel_larger_than_input(self):
        with pytest.raises(ValueError):
            ad.conv2d(ad.tensor(np.ones((1, 2, 2))), ad.tensor(np.ones((1, 1, 3, 3))))

    def test_batched_matches_single(self, rng):
        x = rng.random((2, 3, 8, 8)).astype(np.float32)
        k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        full = ad.conv2d(ad.tensor(x), ad.tensor(k), stride=2).data
        for i in range(2):
            single = ad.conv2d(ad.tensor(x[i]), ad.tensor(k), stride=2).data
            np.testing.assert_allclose(full[i], single)

    def test_kernel_gradient_matches_finite_differences(self, rng):
        x = rng.random((2, 8, 8)).astype(np.float32)
        k = 0.3 * rng.standard_normal((3, 2, 3, 3)).astype(np.float32)

        def loss(xi, ki):
            return ad.conv2d(xi, ki, stride=2)

        check_gradients(loss, [x, k])


class TestReduce:
    def test_sum(self):
        assert float(ad.reduce_sum(ad.tensor([1.0, 2.0, 3.0])).data) == 6.0

    def test_mean_all_axes(self):
        out = ad.reduce_mean(ad.tensor([[1.0, 3.0], [5.0, 7.0]]))
        assert float(out.data) == 4.0

    def test_invalid_axis(self):
        with pytest.raises(ValueError):
            ad.reduce_sum(ad.tensor([1.0]), axes=(1,))

    def test_mean_gradient_uniform(self):
        x = ad.tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.reduce_mean(x)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, np.full((2, 3), 1.0 / 6.0))

    def test_partial_axes(self, rng):
        x = rng.random((2, 3, 4)).astype(np.float32)
        out = ad.reduce_sum(ad.tensor(x), axes=(1,))
        np.testing.assert_allclose(out.data, x.sum(axis=1), rtol=1e-6)


class TestBackward:
    def test_square_derivative(self):
        x = ad.tensor([3.0], requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.reduce_sum(ad.mul(x, x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [6.0])

    def test_sigmoid_slope_quarter(self):
        x = ad.tensor(np.zeros(4), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.reduce_sum(ad.sigmoid(x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, 0.25)

    def test_non_scalar_loss_rejected(self):
        x = ad.tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.mul(x, x)
        with pytest.raises(ValueError):
            tape.backward(y)

    def test_fanout_accumulates(self):
        x = ad.tensor([1.5], requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.reduce_sum(ad.add(x, x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0])

    def test_repeated_backward_accumulates(self):
        x = ad.tensor([2.0], requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.reduce_sum(ad.mul(x, x))
        tape.backward(loss)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [8.0])

    def test_composed_graph_matches_finite_differences(self, rng):
        x = rng.random((1, 6, 6)).astype(np.float32)
        k = 0.5 * rng.standard_normal((2, 1, 3, 3)).astype(np.float32)

        def loss(xi, ki):
            return ad.reduce_mean(ad.tanh(ad.conv2d(xi, ki, stride=1)))

        check_gradients(loss, [x, k])

    def test_no_tape_records_nothing(self):
        x = ad.tensor([1.0], requires_grad=True)
        y = ad.mul(x, x)
        assert not y.requires_grad


class TestRegisteredOpGradients:
    """Finite-difference audit of each registered op on randomized shapes."""

    BINARY = {
        "add": ad.add,
        "sub": ad.sub,
        "mul": ad.mul,
        "div": lambda a, b: ad.div(a, ad.add(ad.mul(b, b), ad.tensor(0.5))),
    }
    UNARY = {
        "tanh": ad.tanh,
        "sigmoid": ad.sigmoid,
        "exp": ad.exp,
        "log": lambda a: ad.log(ad.add(ad.mul(a, a), ad.tensor(0.5))),
        "relu_shifted": lambda a: ad.relu(ad.add(a, ad.tensor(0.05))),
        "clip_inside": lambda a: ad.clip(ad.mul(a, ad.tensor(0.2)), -0.5, 0.5),
    }

    @pytest.mark.parametrize("name", sorted(BINARY))
    def test_binary_gradient(self, name, rng):
        fn = self.BINARY[name]
        for trial in range(5):
            shape = tuple(rng.integers(1, 9, size=rng.integers(1, 3)))
            a = rng.standard_normal(shape).astype(np.float32)
            b = rng.standard_normal(shape).astype(np.float32)
            check_gradients(fn, [a, b])

    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary_gradient(self, name, rng):
        fn = self.UNARY[name]
        for trial in range(5):
            shape = tuple(rng.integers(1, 9, size=rng.integers(1, 3)))
            a = rng.standard_normal(shape).astype(np.float32)
            check_gradients(fn, [a])

    def test_structural_ops_gradient(self, rng):
        a = rng.random((3, 4)).astype(np.float32)
        b = rng.random((3, 2)).astype(np.float32)
        v = rng.random(6).astype(np.float32)

        def loss(x, y, bias):
            joined = ad.concat_last([x, y])
            biased = ad.add_rowvec(joined, bias)
            part = ad.narrow_last(biased, 1, 4)
            return ad.mul(part, part)

        check_gradients(loss, [a, b, v])

    def test_expand_last_gradient(self, rng):
        a = rng.random((4, 1)).astype(np.float32)
        w = rng.random((4, 5)).astype(np.float32)
        check_gradients(
            lambda x, y: ad.mul(ad.expand_last(x, 5), y), [a, w]
        )

    def test_reshape_upsample_gradient(self, rng):
        a = rng.random((2, 3, 3)).astype(np.float32)

        def loss(x):
            up = ad.upsample2x(x)
            return ad.mul(up, up)

        check_gradients(loss, [a])

    def test_add_channel_gradient(self, rng):
        x = rng.random((2, 3, 4, 4)).astype(np.float32)
        b = rng.random(3).astype(np.float32)
        check_gradients(
            lambda xi, bi: ad.tanh(ad.add_channel(xi, bi)), [x, b]
        )

    def test_weighted_gather_gradient(self, rng):
        src = rng.random((3, 4)).astype(np.float32)
        idx = rng.integers(0, 12, size=(6, 4))
        w = rng.random((6, 4)).astype(np.float32)

        def loss(s):
            out = ad.weighted_gather(s, idx, w, (6,))
            return ad.mul(out, out)

        check_gradients(loss, [src])


class TestDeterminism:
    def test_replay_bit_identical(self, rng):
        x0 = rng.random((2, 5, 5)).astype(np.float32)
        k0 = rng.standard_normal((2, 2, 2, 2)).astype(np.float32)

        def run():
            x = ad.tensor(x0.copy(), requires_grad=True)
            k = ad.tensor(k0.copy(), requires_grad=True)
            with ad.Tape() as tape:
                h = ad.conv2d(x, k, stride=1)
                loss = ad.reduce_mean(ad.mul(ad.sigmoid(h), h))
            tape.backward(loss)
            return loss.data.copy(), x.grad.copy(), k.grad.copy()

        la, xa, ka = run()
        lb, xb, kb = run()
        assert la.tobytes() == lb.tobytes()
        assert xa.tobytes() == xb.tobytes()
        assert ka.tobytes() == kb.tobytes()


class TestAdam:
    def test_first_step_size_is_lr(self):
        p = ad.tensor([1.0], requires_grad=True)
        opt = ad.Adam([p], lr=0.005)
        p.grad = np.ones(1, dtype=np.float32)
        opt.step()
        # Bias-corrected first step has magnitude lr/(1 + eps') ~ lr.
        assert abs((1.0 - p.data[0]) - 0.005) < 1e-5
        assert p.grad is None  # gradients zeroed after the update

    def test_zero_gradient_no_move(self):
        p = ad.tensor([0.7], requires_grad=True)
        opt = ad.Adam([p])
        p.grad = np.zeros(1, dtype=np.float32)
        opt.step()
        assert p.data[0] == np.float32(0.7)

    def test_missing_gradient_errors(self):
        p = ad.tensor([0.7], requires_grad=True)
        opt = ad.Adam([p])
        with pytest.raises(ValueError):
            opt.step()

    def test_opposing_gradients_return_near_start(self):
        # Hand-evaluated: second step magnitude must not exceed the first,
        # so +1 then -1 gradients end within one lr of the start.
        p = ad.tensor([0.0], requires_grad=True)
        opt = ad.Adam([p], lr=0.01)
        p.grad = np.ones(1, dtype=np.float32)
        opt.step()
        first = abs(float(p.data[0]))
        p.grad = -np.ones(1, dtype=np.float32)
        opt.step()
        assert abs(float(p.data[0])) <= first + 1e-7


class TestOracleSelfChecks:
    """The finite-difference helper itself must be trustworthy."""

    def test_matches_known_derivative(self):
        def f(x):
            return float(np.sum(x**3))

        x = np.array([0.5, -1.2, 2.0])
        num = numerical_gradient(f, [x], 0)
        np.testing.assert_allclose(num, 3 * x**2, rtol=1e-5)

    def test_relative_error_floor(self):
        assert relative_error([0.0], [1e-7]) < 1e-2
