import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brushwork import tensor as T
from brushwork.gradcheck import check_gradient
from brushwork.tensor import (
    NonFiniteError, ShapeError, Tape, TapeError, Tensor, backward, categorical_sample, conv2d, leaf,
    no_grad, softmax2d, stop_grad, straight_thru, strict,
)


def grads(fn, *values):
    leaves = [leaf(np.asarray(v, dtype=np.float64)) for v in values]
    with Tape() as tape:
        out = fn(*leaves)
        tape.backward(out)
    return out, [l.grad for l in leaves]


def conv_loop(x, k, stride, pad):
    """Direct nested-loop cross-correlation."""
    ci, h, w = x.shape
    co, _, kk, _ = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kk) // stride + 1
    wo = (w + 2 * pad - kk) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                out[o, i, j] = np.sum(xp[:, i * stride:i * stride + kk, j * stride:j * stride + kk] * k[o])
    return out


class TestElementwise:
    def test_add_values_and_grads(self):
        out, (gx, gy) = grads(lambda x, y: x + y, 2.0, 3.0)
        assert float(out.values) == 5.0
        assert gx == 1.0 and gy == 1.0

    def test_log_of_one_is_guarded(self):
        assert Tensor(1.0).log().values == np.log(1.0 + 1e-12)
        assert abs(Tensor(1.0).log().values - 1e-12) < 1e-15

    def test_composite_matches_finite_difference(self):
        f = lambda x, y: (x - y).abs().log()
        _, (gx, _) = grads(f, 3.0, 1.0)
        h = 1e-5
        num = (np.log(abs(3 + h - 1) + 1e-12) - np.log(abs(3 - h - 1) + 1e-12)) / (2 * h)
        assert abs(gx - num) / abs(num) <= 1e-6

    @pytest.mark.parametrize("kind", ["add", "sub", "mul", "div", "pow", "min", "max"])
    def test_binary_with_trailing_broadcast(self, kind):
        rng = np.random.default_rng(1)
        x = rng.uniform(0.5, 2.0, (3, 4))
        y = rng.uniform(0.5, 2.0, (3, 1)) + 0.01
        err = check_gradient(lambda a, b: T.elementwise(kind, a, b), [x, y])
        assert err <= 1e-6

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))
        assert "(2, 3)" in str(exc.value) and "(3, 2)" in str(exc.value)

    def test_strict_mode_rejects_nan(self):
        with strict(), pytest.raises(NonFiniteError):
            Tensor(np.array([np.nan])) * 2.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.elementwise("cube", Tensor(1.0))

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
    def test_sigmoid_in_unit_interval(self, xs):
        s = Tensor(np.array(xs)).sigmoid().values
        assert np.all((s > 0) & (s < 1))


class TestReduce:
    def test_sum(self):
        out, (g,) = grads(lambda x: x.sum(), [1.0, 2.0, 3.0])
        assert float(out.values) == 6.0
        np.testing.assert_array_equal(g, [1, 1, 1])

    def test_mean_of_constant(self):
        assert Tensor(np.full((3, 5), 2.5)).mean().values == 2.5

    def test_max_routes_to_first_argmax(self):
        _, (g,) = grads(lambda x: x.max(), [1.0, 4.0, 4.0, 2.0])
        np.testing.assert_array_equal(g, [0, 1, 0, 0])

    def test_max_random_4x4_finite_difference(self):
        x = np.random.default_rng(3).permutation(16).reshape(4, 4) * 0.37
        assert check_gradient(lambda a: a.max(axis=0), [x]) <= 1e-6

    def test_empty_reduction_raises(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((0, 3))).sum(axis=0)


class TestConv2d:
    def test_unit_kernel_is_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 5, 6))
        np.testing.assert_array_equal(conv2d(x, np.ones((1, 1, 1, 1))).values, x)

    def test_ones_kernel_interior(self):
        out = conv2d(np.full((1, 6, 6), 0.7), np.ones((1, 1, 3, 3))).values
        np.testing.assert_allclose(out[0, 1:-1, 1:-1], 6.3, atol=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, "same"), (1, "valid"), (2, "same"), (2, "valid")])
    def test_against_loop(self, stride, padding):
        rng = np.random.default_rng(stride)
        x, k = rng.normal(size=(2, 7, 8)), rng.normal(size=(3, 2, 3, 3))
        pad = 1 if padding == "same" else 0
        out = conv2d(x, k, stride=stride, padding=padding).values
        np.testing.assert_allclose(out, conv_loop(x, k, stride, pad), atol=1e-12)

    def test_kernel_gradient_8x8(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 8, 8))
        err = check_gradient(lambda k: conv2d(x, k), [rng.normal(size=(2, 2, 3, 3))])
        assert err <= 1e-5

    def test_channels_last_agrees(self):
        rng = np.random.default_rng(2)
        x, k = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3))
        a = conv2d(x, k).values
        b = conv2d(np.moveaxis(x, 1, -1), k, channels_last=True).values
        np.testing.assert_allclose(np.moveaxis(b, -1, 1), a, atol=1e-12)

    def test_kernel_too_large(self):
        with pytest.raises(ValueError):
            conv2d(np.ones((1, 2, 2)), np.ones((1, 1, 5, 5)), padding="valid")

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 2, 2)))


class TestSoftmax:
    def test_constant_field(self):
        np.testing.assert_allclose(softmax2d(np.zeros((2, 2))).values, 0.25)

    def test_saturation(self):
        f = np.zeros((3, 3))
        f[1, 2] = 50
        assert softmax2d(f).values[1, 2] > 1 - 1e-9

    def test_sums_to_one_and_shift_invariant(self):
        f = np.random.default_rng(0).normal(size=(5, 4)) * 3
        p = softmax2d(f).values
        assert abs(p.sum() - 1) <= 1e-9 and np.all(p > 0)
        np.testing.assert_allclose(softmax2d(f + 17.0).values, p, atol=1e-15)

    def test_jvp_3x3(self):
        rng = np.random.default_rng(9)
        assert check_gradient(softmax2d, [rng.normal(size=(3, 3))]) <= 1e-6


class TestStopGrad:
    def test_value_and_zero_grad(self):
        out, (g,) = grads(lambda x: stop_grad(x) * 1.0 + 0.0 * x, 5.0)
        assert float(out.values) == 5.0 and g == 0.0

    def test_frozen_factor(self):
        out, (g,) = grads(lambda x: x * stop_grad(x), 3.0)
        assert float(out.values) == 9.0 and g == 3.0

    def test_only_path_gives_exact_zero(self):
        _, (g,) = grads(lambda x: (stop_grad(x).exp() * 0.0 + stop_grad(x) ** 2.0).sum() + x.sum() * 0.0,
                        np.ones(4))
        np.testing.assert_array_equal(g, 0.0)


class TestStraightThrough:
    def test_forward_is_hard_backward_is_soft(self):
        out, (gx, gy) = grads(straight_thru, 2.0, 5.0)
        assert float(out.values) == 5.0 and gx == 1.0 and gy == 0.0

    def test_same_operand_is_identity(self):
        x = np.random.default_rng(0).normal(size=5)
        out, (g,) = grads(lambda a: (straight_thru(a, a) * 3.0).sum(), x)
        np.testing.assert_allclose(out.values, 3 * x.sum())
        np.testing.assert_array_equal(g, 3.0)

    def test_squared_loss(self):
        out, (gs, gh) = grads(lambda s, h: straight_thru(s, h) ** 2.0, 0.4, 1.0)
        assert float(out.values) == 1.0
        assert gs == pytest.approx(2.0, abs=1e-12) and gh == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            straight_thru(np.ones(2), np.ones(3))


class TestBackward:
    def test_square(self):
        _, (g,) = grads(lambda x: x * x, 3.0)
        assert g == 6.0

    def test_chain_of_ten_ops(self):
        def chain(x):
            y = x * 1.3
            y = y.sigmoid()
            y = y + 0.2
            y = y.log()
            y = y.exp()
            y = y * y
            y = y.tanh()
            y = y.sqrt()
            y = y - 0.1
            return y.abs()
        assert check_gradient(chain, [np.array(0.7)]) <= 1e-6

    def test_non_scalar_loss_rejected(self):
        x = leaf(np.ones(3))
        with Tape():
            y = x * 2.0
            with pytest.raises(ShapeError):
                backward(y)

    def test_tape_consumed_once(self):
        x = leaf(2.0)
        with Tape() as tape:
            y = x * x
            tape.backward(y)
            with pytest.raises(TapeError):
                tape.backward(y)

    def test_bit_identical_replay(self):
        rng = np.random.default_rng(4)
        x, k = rng.normal(size=(2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
        _, g1 = grads(lambda a, b: conv2d(a, b).relu().sum(), x, k)
        _, g2 = grads(lambda a, b: conv2d(a, b).relu().sum(), x, k)
        for a, b in zip(g1, g2):
            assert a.tobytes() == b.tobytes()

    def test_no_grad_records_nothing(self):
        x = leaf(1.0)
        with Tape() as tape:
            with no_grad():
                x * 2.0
            assert len(tape) == 0

    def test_tapes_are_thread_local(self):
        results = {}

        def work(i):
            x = leaf(float(i))
            with Tape() as tape:
                y = x * x
                tape.backward(y)
            results[i] = float(x.grad)
        threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == {i: 2.0 * i for i in range(4)}


class TestCategoricalSample:
    def test_point_mass(self):
        idx, p = categorical_sample(np.array([[1.0, 0.0], [0.0, 0.0]]), np.random.default_rng(0))
        assert idx == (0, 0) and float(p.values) == 1.0

    def test_uniform_frequencies(self):
        rng = np.random.default_rng(11)
        probs = Tensor(np.full((2, 2), 0.25))
        counts = np.zeros((2, 2))
        with no_grad():
            for _ in range(100_000):
                (i, j), _ = categorical_sample(probs, rng)
                counts[i, j] += 1
        np.testing.assert_allclose(counts / 1e5, 0.25, atol=0.01)

    def test_deterministic(self):
        probs = softmax2d(np.random.default_rng(0).normal(size=(3, 3)))
        runs = [[categorical_sample(probs, r)[0] for _ in range(100)]
                for r in (np.random.default_rng(8), np.random.default_rng(8))]
        assert runs[0] == runs[1]

    def test_gradient_reaches_probability(self):
        _, (g,) = grads(lambda f: categorical_sample(softmax2d(f), np.random.default_rng(1))[1], np.zeros((2, 2)))
        assert np.any(g != 0)

    def test_invalid_distribution(self):
        with pytest.raises(ValueError):
            categorical_sample(np.array([[0.5, 0.6]]), np.random.default_rng(0))
