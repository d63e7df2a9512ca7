import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from imachsr import tensor as T
from imachsr.tensor import Tensor
from oracles import bilinear_pixel, numeric_grad, rel_err


def param(arr):
    return Tensor(np.array(arr, dtype=float), requires_grad=True)


def check_grad(build, *arrays, tol=1e-5):
    """Compare backward of scalar build(*tensors) with central differences."""
    ts = [param(a) for a in arrays]
    out = build(*ts)
    T.backward(out)
    for t in ts:
        num = numeric_grad(lambda: build(*[Tensor(u.data) for u in ts]).item(), t.data)
        assert rel_err(t.grad, num) < tol


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(T.elementwise("add", Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])

    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1, 0, 2])).data, [0, 0, 2])

    def test_mul_grad_matches_fd(self):
        a, b = param([1.0, 2.0]), Tensor([3.0, 4.0])
        T.backward(T.tsum(a * b))
        np.testing.assert_allclose(a.grad, [3, 4])
        num = numeric_grad(lambda: float(np.sum(a.data * b.data)), a.data)
        assert rel_err(a.grad, num) < 1e-6

    def test_scalar_broadcast_accumulates_into_scalar(self):
        a, s = param([1.0, 2.0, 3.0]), param(2.0)
        T.backward(T.tsum(a * s))
        np.testing.assert_allclose(s.grad, [6.0])
        np.testing.assert_allclose(a.grad, [2.0, 2.0, 2.0])

    def test_shape_mismatch_names_both(self):
        with pytest.raises(T.ShapeError, match=r"\(2,\).*\(3,\)"):
            Tensor([1, 2]) + Tensor([1, 2, 3])

    def test_exp_overflow_raises(self):
        with pytest.raises(T.NumericalError):
            T.exp(Tensor([1000.0]))

    def test_log_is_clamped(self):
        out = T.log(Tensor([0.0, 1.0]))
        assert out.data[0] == pytest.approx(np.log(T.EPS))
        assert np.isfinite(out.data).all()

    def test_log_of_nan_raises(self):
        with pytest.raises(T.NumericalError):
            T.log(Tensor([np.nan]))

    @pytest.mark.parametrize("kind", ["add", "sub", "mul"])
    def test_binary_grads(self, kind, rng):
        a, b = rng.normal(size=5), rng.normal(size=5)
        check_grad(lambda x, y: T.tsum(T.elementwise(kind, x, y) * T.elementwise(kind, x, y)), a, b)

    @pytest.mark.parametrize("kind", ["neg", "exp", "log", "relu"])
    def test_unary_grads(self, kind, rng):
        a = rng.uniform(0.2, 2.0, size=6) * rng.choice([-1, 1], size=6)
        if kind == "log":
            a = np.abs(a)
        check_grad(lambda x: T.tsum(T.elementwise(kind, x) * Tensor(np.arange(1.0, 7.0))), a)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_dot(self):
        assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).item() == 11

    def test_grad_fd(self, rng):
        w = Tensor(rng.normal(size=(3, 2)))
        check_grad(lambda a, b: T.tsum(T.mul(T.matmul(a, b), w)), rng.normal(size=(3, 4)), rng.normal(size=(4, 2)),
                   tol=1e-6)

    def test_inner_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv:
    def test_delta_kernel_is_identity(self, rng):
        x = rng.normal(size=(2, 5, 6))
        w = np.zeros((2, 2, 3, 3))
        w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, x)

    def test_ones_kernel_sums_with_zero_padding(self):
        out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0])).data[0]
        # direct sum of the in-bounds part of each 3x3 window
        expected = np.array([[sum(1 for di in (-1, 0, 1) for dj in (-1, 0, 1)
                                  if 0 <= i + di < 3 and 0 <= j + dj < 3) for j in range(3)] for i in range(3)])
        np.testing.assert_array_equal(out, expected)
        assert out[1, 1] == 9 and out[0, 0] == 4

    def test_matches_direct_loop(self, rng):
        x, w, b = rng.normal(size=(2, 4, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        ref = np.zeros((3, 4, 5))
        for o in range(3):
            for i in range(4):
                for j in range(5):
                    ref[o, i, j] = np.sum(xp[:, i:i + 3, j:j + 3] * w[o]) + b[o]
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data, ref, rtol=1e-12, atol=1e-12)

    def test_grads_fd(self, rng):
        proj = Tensor(rng.normal(size=(2, 2, 4, 4)))
        check_grad(lambda x, w, b: T.tsum(T.mul(T.conv2d(x, w, b), proj)),
                   rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2))

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeError, match="channel"):
            T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor([0.0]))

    def test_conv1x1_grads_fd(self, rng):
        proj = Tensor(rng.normal(size=(3, 2, 2)))
        check_grad(lambda x, w, b: T.tsum(T.mul(T.conv1x1(x, w, b), proj)),
                   rng.normal(size=(4, 2, 2)), rng.normal(size=(3, 4)), rng.normal(size=3))


class TestMaxpool:
    def test_max_of_four(self):
        assert T.maxpool2(Tensor([[[1, 2], [3, 4]]])).item() == 4

    def test_ties_route_to_first(self):
        x = param(np.full((1, 4, 4), 2.0))
        out = T.maxpool2(x)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 2.0))
        T.backward(T.tsum(out))
        expected = np.zeros((1, 4, 4))
        expected[0, ::2, ::2] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_grad_fd_off_ties(self, rng):
        x = rng.permutation(32).reshape(2, 4, 4) * 0.1  # distinct values
        proj = Tensor(rng.normal(size=(2, 2, 2)))
        check_grad(lambda t: T.tsum(T.mul(T.maxpool2(t), proj)), x, tol=1e-6)

    def test_odd_dims(self):
        with pytest.raises(T.ShapeError):
            T.maxpool2(Tensor(np.ones((1, 3, 4))))


class TestUpsample:
    def test_same_size_identity(self, rng):
        x = rng.normal(size=(2, 3, 3))
        np.testing.assert_array_equal(T.upsample_bilinear(Tensor(x), 3, 3).data, x)

    def test_single_pixel_fills(self):
        out = T.upsample_bilinear(Tensor([[[2.5]]]), 4, 5).data
        np.testing.assert_array_equal(out, np.full((1, 4, 5), 2.5))

    def test_2x2_to_4x4_matches_scalar_formula(self):
        src = np.array([[1.0, 2.0], [3.0, 5.0]])
        out = T.upsample_bilinear(Tensor(src[None]), 4, 4).data[0]
        ref = np.array([[bilinear_pixel(src, 4, 4, i, j) for j in range(4)] for i in range(4)])
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-14)
        assert out[0, 0] == 1.0 and out[1, 1] == pytest.approx(1 * 9 / 16 + 2 * 3 / 16 + 3 * 3 / 16 + 5 / 16)

    def test_non_integer_ratio(self, rng):
        src = rng.normal(size=(3, 5))
        out = T.upsample_bilinear(Tensor(src[None]), 7, 8).data[0]
        ref = np.array([[bilinear_pixel(src, 7, 8, i, j) for j in range(8)] for i in range(7)])
        np.testing.assert_allclose(out, ref, atol=1e-13)

    def test_grad_fd(self, rng):
        proj = Tensor(rng.normal(size=(2, 6, 4)))
        check_grad(lambda t: T.tsum(T.mul(T.upsample_bilinear(t, 6, 4), proj)), rng.normal(size=(2, 3, 2)),
                   tol=1e-6)

    def test_shrinking_rejected(self):
        with pytest.raises(T.ShapeError):
            T.upsample_bilinear(Tensor(np.ones((1, 4, 4))), 2, 4)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0]), 0).data, [0.5, 0.5])

    def test_value(self):
        np.testing.assert_allclose(T.softmax(Tensor([1.0, 0.0]), 0).data, [0.73106, 0.26894], atol=1e-5)
        e = np.e
        np.testing.assert_allclose(T.softmax(Tensor([1.0, 0.0]), 0).data, [e / (e + 1), 1 / (e + 1)], rtol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)), st.floats(-100, 100), st.integers(0, 1))
    def test_rows_normalised_and_shift_invariant(self, x, c, axis):
        p = T.softmax(Tensor(x), axis).data
        assert np.all((p >= 0) & (p <= 1))
        np.testing.assert_allclose(p.sum(axis=axis), 1.0, atol=1e-12)
        np.testing.assert_allclose(T.softmax(Tensor(x + c), axis).data, p, atol=1e-12)

    def test_grads_fd(self, rng):
        proj = Tensor(rng.normal(size=(3, 4)))
        check_grad(lambda t: T.tsum(T.mul(T.softmax(t, 1), proj)), rng.normal(size=(3, 4)), tol=1e-6)
        check_grad(lambda t: T.tsum(T.mul(T.log_softmax(t, 0), proj)), rng.normal(size=(3, 4)), tol=1e-6)

    def test_bad_axis(self):
        with pytest.raises(T.ShapeError):
            T.softmax(Tensor([1.0, 2.0]), 3)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = param(rng.normal(size=(2, 3, 4)))
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_power_rule(self):
        x = param([1.0, 2.0])
        T.backward(T.tsum(x * x))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_repeated_calls_accumulate(self):
        x = param([1.0, 2.0])
        loss = T.tsum(x * x)
        T.backward(loss)
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])
        x.zero_grad()
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_rejected(self):
        with pytest.raises(T.ShapeError):
            T.backward(param([1.0, 2.0]) * 2.0)

    def test_tape_is_topological_and_visits_once(self):
        x = param([1.0, 2.0])
        y = x * x
        z = T.tsum(y + y)  # y reached along two paths
        tape = T.Tape(z)
        ids = [n.node_id for n in tape]
        assert len(ids) == len(set(ids))
        pos = {n.node_id: i for i, n in enumerate(tape)}
        for n in tape:
            for p in n._parents:
                assert pos[p.node_id] < pos[n.node_id]
        T.backward(z)
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_deterministic(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        w = rng.normal(size=(2, 3, 3, 3))

        def run():
            wt = param(w)
            out = T.tsum(T.relu(T.conv2d(Tensor(x), wt, Tensor(np.zeros(2)))))
            T.backward(out)
            return out.data.tobytes(), wt.grad.tobytes()

        assert run() == run()


def test_clip_value_and_gradient():
    a = T.Tensor([-2.0, -0.5, 0.0, 0.7, 3.0], requires_grad=True)
    out = T.clip(a, -1.0, 0.5)
    np.testing.assert_array_equal(out.data, [-1.0, -0.5, 0.0, 0.5, 0.5])
    T.backward(T.tsum(out))
    np.testing.assert_array_equal(a.grad, [0.0, 1.0, 1.0, 0.0, 0.0])
