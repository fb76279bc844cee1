import io

import numpy as np
import pytest

from msdet import tensor as T
from msdet.tensor import Tensor


def loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor(np.eye(2)), Tensor(a))
        assert np.array_equal(out.data, a)

    def test_selector_row(self):
        out = T.matmul(Tensor([[1.0, 0.0]]), Tensor([[5.0], [7.0]]))
        assert np.array_equal(out.data, [[5.0]])

    def test_random_against_loop_oracle_and_fd(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(5, 4))
        b = rng.normal(size=(4, 3))
        out = T.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, loop_matmul(a, b), atol=1e-12)
        err = T.check_gradient(
            lambda ts: T.sum_all(T.matmul(ts[0], ts[1])), [a, b], h=1e-6
        )
        assert err < 1e-4

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(T.ShapeMismatchError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmaxRows:
    def test_symmetry(self):
        out = T.softmax_rows(Tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_max_shift_no_overflow(self):
        out = T.softmax_rows(Tensor([[1000.0, 1000.0, 1000.0]]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [[1 / 3] * 3])

    def test_rows_sum_to_one_extremes(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1e6, 1e6, size=(20, 7))
        out = T.softmax_rows(Tensor(x))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out.data >= 0)

    def test_gradient_of_sum_is_zero(self):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
        T.backward(T.sum_all(T.softmax_rows(x)))
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)


class TestLinear:
    def test_identity(self):
        out = T.linear(Tensor([1.0, 2.0]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
        assert np.array_equal(out.data, [1.0, 2.0])

    def test_sum_plus_bias(self):
        out = T.linear(Tensor([1.0, 1.0]), Tensor([[1.0], [1.0]]), Tensor([1.0]))
        assert np.array_equal(out.data, [3.0])

    def test_random_matches_loop_and_fd(self):
        rng = np.random.default_rng(4)
        x, w, b = rng.normal(size=(6, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
        out = T.linear(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, loop_matmul(x, w) + b, atol=1e-12)
        err = T.check_gradient(
            lambda ts: T.sum_all(T.linear(ts[0], ts[1], ts[2])), [x, w, b]
        )
        assert err < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeMismatchError):
            T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))


class TestConcatChannels:
    def test_basic(self):
        out = T.concat_channels(Tensor([[1.0]]), Tensor([[2.0]]))
        assert np.array_equal(out.data, [[1.0, 2.0]])

    def test_empty_right_is_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        out = T.concat_channels(Tensor(x), Tensor(np.zeros((3, 0))))
        assert np.array_equal(out.data, x)

    def test_gradient_routing_fd(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 6))
        err = T.check_gradient(
            lambda ts: T.sum_all(T.mul(T.concat_channels(ts[0], ts[1]), Tensor(w))),
            [a, b],
        )
        assert err < 1e-4

    def test_leading_mismatch(self):
        with pytest.raises(T.ShapeMismatchError):
            T.concat_channels(Tensor(np.zeros((2, 1))), Tensor(np.zeros((3, 1))))


class TestElementwiseOps:
    def test_layer_norm_constant_row(self):
        out = T.layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_relu_values(self):
        out = T.relu(Tensor([[-1.0, 2.0]]))
        assert np.array_equal(out.data, [[0.0, 2.0]])

    def test_cross_entropy_rejects_bad_target(self):
        with pytest.raises(ValueError, match="out of range"):
            T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_cross_entropy_value(self):
        # uniform logits: loss per row is log(C)
        out = T.cross_entropy(Tensor(np.zeros((2, 4))), [1, 2])
        np.testing.assert_allclose(float(out.data), 2 * np.log(4), atol=1e-12)

    def test_l1_loss_value(self):
        out = T.l1_loss(Tensor([[1.0, -2.0]]), Tensor([[0.0, 1.0]]))
        assert float(out.data) == 4.0


class TestBackward:
    def test_two_path_accumulation_hand_computed(self):
        # z = (x + x) summed, so dz/dx = 2 on each element
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        T.backward(T.sum_all(T.add(x, x)))
        np.testing.assert_allclose(x.grad, [[2.0, 2.0]])

    def test_shared_input_through_two_ops(self):
        # y = sum(3x) + sum(x * x): dy/dx = 3 + 2x
        x = Tensor([2.0, -1.0], requires_grad=True)
        loss = T.add(T.sum_all(T.scale(x, 3.0)), T.sum_all(T.mul(x, x)))
        T.backward(loss)
        np.testing.assert_allclose(x.grad, [3 + 4.0, 3 - 2.0])

    def test_backward_requires_scalar(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(T.ShapeMismatchError):
            T.backward(T.relu(x))

    def test_replay_same_seed_bit_identical(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            out = T.softmax_rows(T.matmul(T.relu(x), w))
            loss = T.sum_all(T.mul(out, Tensor(rng.normal(size=(4, 4)))))
            T.backward(loss)
            return out.data.copy(), x.grad.copy()
        o1, g1 = run()
        o2, g2 = run()
        assert np.array_equal(o1, o2)
        assert np.array_equal(g1, g2)


class TestStructuredOps:
    def test_gather_rows(self):
        x = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        out = T.gather_rows(x, [2, 0, 2])
        assert np.array_equal(out.data[0], [6, 7, 8])
        T.backward(T.sum_all(out))
        np.testing.assert_allclose(x.grad, [[1, 1, 1], [0, 0, 0], [2, 2, 2], [0, 0, 0]])

    def test_segment_max_forward(self):
        x = Tensor(np.array([[1.0, 5.0], [2.0, 1.0], [7.0, 0.0], [3.0, 4.0]]))
        out = T.segment_max(x, [0, 0, 1, 1], 2)
        assert np.array_equal(out.data, [[2.0, 5.0], [7.0, 4.0]])

    def test_segment_max_rejects_empty_segment(self):
        with pytest.raises(ValueError):
            T.segment_max(Tensor(np.zeros((2, 1))), [0, 2], 3)

    def test_interp_rows_weighted_mean(self):
        x = Tensor(np.array([[1.0], [3.0]]))
        out = T.interp_rows(x, [[0, 1]], [[0.25, 0.75]])
        np.testing.assert_allclose(out.data, [[2.5]])


class TestSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(7)
        t = Tensor(rng.normal(size=(3, 5, 2)))
        buf = io.BytesIO()
        T.save_tensor(buf, t)
        buf.seek(0)
        back = T.load_tensor(buf)
        assert np.array_equal(back.data, t.data)

    def test_scalar_round_trip(self):
        buf = io.BytesIO()
        T.save_tensor(buf, Tensor(3.25))
        buf.seek(0)
        assert float(T.load_tensor(buf).data) == 3.25

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            T.load_tensor(io.BytesIO(b"XXXX" + b"\0" * 16))


class TestFiniteDifferenceSuite:
    @pytest.mark.parametrize("seed", range(5))
    def test_all_ops_per_seed(self, seed):
        from msdet.gradcheck import op_checks
        worst = op_checks(seed)
        for op, err in worst.items():
            assert err < 1e-4, f"{op}: {err}"
