import numpy as np
import pytest

from stict import tensor as T
from stict.tensor import Tensor

from conftest import bilinear_resize_oracle, conv2d_oracle, warp_oracle


class TestElementwise:
    def test_multiply_direct(self):
        out = T.multiply(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert np.array_equal(out.data, [3.0, 8.0])

    def test_add_zero_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        out = T.add(x, 0.0)
        assert np.array_equal(out.data, x.data)

    def test_sigmoid_symmetry(self):
        assert T.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_channel_broadcast(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 5)))
        lam = Tensor(rng.random((2, 1, 4, 5)))
        out = T.multiply(x, lam)
        assert out.shape == x.shape
        assert np.allclose(out.data, x.data * lam.data)

    def test_shape_mismatch_reports_both(self):
        with pytest.raises(T.ShapeError) as err:
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)

    def test_log_clamp_floor(self):
        out = T.logarithm(Tensor([0.0, 1.0]))
        assert out.data[0] == pytest.approx(np.log(1e-7))
        assert out.data[1] == 0.0

    def test_dispatch(self):
        out = T.elementwise("power", Tensor([2.0, 3.0]), 2.0)
        assert np.array_equal(out.data, [4.0, 9.0])
        with pytest.raises(ValueError):
            T.elementwise("modulo", Tensor([1.0]), 2.0)

    def test_non_finite_rejected(self):
        with pytest.raises(T.NonFiniteError):
            T.divide(Tensor([1.0]), Tensor([0.0]))


class TestConv2d:
    def test_ones_sum(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, k)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_identity_kernel(self, rng):
        x = Tensor(rng.standard_normal((2, 1, 5, 5)))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = T.conv2d(x, Tensor(k), padding=1)
        assert np.array_equal(out.data, x.data)

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((2, 3, 8, 8))
        k = rng.standard_normal((4, 3, 3, 3))
        out = T.conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64), stride=2, padding=1)
        ref = conv2d_oracle(x, k, stride=2, padding=1)
        assert np.abs(out.data - ref).max() < 1e-12

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_degenerate_output_rejected(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


class TestResample:
    def test_nearest_duplicates(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = T.resample(x, 2, "nearest")
        expect = np.array([[[[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]]], dtype=float)
        assert np.array_equal(out.data, expect)

    def test_factor_one_identity(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 5, 7)))
        for mode in ("nearest", "bilinear"):
            assert np.array_equal(T.resample(x, 1, mode).data, x.data)

    def test_bilinear_matches_oracle(self, rng):
        ramp = np.arange(12, dtype=np.float64).reshape(1, 1, 3, 4)
        out = T.resample(Tensor(ramp, dtype=np.float64), 2, "bilinear")
        assert np.abs(out.data - bilinear_resize_oracle(ramp, 6, 8)).max() < 1e-12
        x = rng.standard_normal((2, 3, 5, 6))
        out = T.resample_to(Tensor(x, dtype=np.float64), (9, 4), "bilinear")
        assert np.abs(out.data - bilinear_resize_oracle(x, 9, 4)).max() < 1e-12

    def test_minimum_extent(self):
        out = T.resample(Tensor(np.ones((1, 1, 2, 2))), 0.25)
        assert out.shape == (1, 1, 1, 1)

    def test_bad_factor(self):
        with pytest.raises(T.ShapeError):
            T.resample(Tensor(np.ones((1, 1, 2, 2))), -1)


class TestReduce:
    def test_mean_direct(self):
        assert T.reduce(Tensor([1.0, 2.0, 3.0]), "mean").item() == 2.0

    def test_sum_zeros(self):
        assert T.reduce(Tensor(np.zeros((3, 3))), "sum").item() == 0.0

    def test_matches_sequential_accumulation(self, rng):
        x = rng.standard_normal((3, 4))
        acc = 0.0
        for v in x.ravel():
            acc += v
        out = T.reduce(Tensor(x, dtype=np.float64), "sum")
        assert abs(out.item() - acc) < 1e-12

    def test_axis_removal(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)))
        out = T.reduce(x, "sum", (1,))
        assert out.shape == (2, 4)

    def test_invalid_axis(self):
        with pytest.raises(T.ShapeError):
            T.reduce(Tensor(np.zeros((2, 2))), "sum", (5,))


class TestWarp:
    def test_zero_flow_identity(self, rng):
        x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        out = T.warp(Tensor(x), np.zeros((2, 2, 5, 5), dtype=np.float32))
        assert np.array_equal(out.data, x)

    def test_unit_shift_on_ramp(self):
        ramp = np.tile(np.arange(4, dtype=np.float64), (4, 1))[None, None]
        flow = np.zeros((1, 2, 4, 4))
        flow[:, 0] = 1.0  # sample one pixel to the right
        out = T.warp(Tensor(ramp, dtype=np.float64), flow)
        expect = np.tile(np.array([1.0, 2.0, 3.0, 3.0]), (4, 1))[None, None]
        assert np.array_equal(out.data, expect)

    def test_matches_oracle(self, rng):
        x = rng.standard_normal((2, 2, 6, 7))
        flow = rng.standard_normal((2, 2, 6, 7)) * 3
        out = T.warp(Tensor(x, dtype=np.float64), flow)
        assert np.abs(out.data - warp_oracle(x, flow)).max() < 1e-12

    def test_non_finite_flow_rejected(self):
        flow = np.full((1, 2, 2, 2), np.nan)
        with pytest.raises(T.NonFiniteError):
            T.warp(Tensor(np.zeros((1, 1, 2, 2))), flow)


class TestBackward:
    def test_quadratic_analytic(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
        loss = T.reduce(T.multiply(x, x), "sum")
        loss.backward()
        assert np.allclose(x.grad, [2.0, -4.0])

    def test_grad_accumulates_once_per_leaf(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True, dtype=np.float64)
        y = T.add(x, x)  # diamond: x used twice
        loss = T.reduce(y, "sum")
        loss.backward()
        assert np.allclose(x.grad, 2.0)

    def test_no_grad_blocks_graph(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True, dtype=np.float64)
        with T.no_grad():
            y = T.multiply(x, 3.0)
        assert y._backward is None and not y.requires_grad

    def test_backward_needs_scalar(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(T.ShapeError):
            T.multiply(x, 2.0).backward()


class TestGradcheck:
    def test_quadratic_passes(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64, name="x")
        report = T.gradcheck(lambda: T.reduce(T.multiply(x, x), "sum"), [x])
        assert report.passed

    def test_conv_mean_passes(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True, dtype=np.float64)
        k = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True, dtype=np.float64)
        report = T.gradcheck(lambda: T.reduce(T.conv2d(x, k, padding=1), "mean"), [x, k])
        assert report.passed, str(report)

    def test_rejects_single_precision(self):
        x = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(TypeError):
            T.gradcheck(lambda: T.reduce(x, "sum"), [x])

    def test_broken_gradient_detected(self, rng):
        # a deliberately wrong backward must fail the check
        x = Tensor(rng.standard_normal(3), requires_grad=True, dtype=np.float64)

        def bad_square(t):
            out = Tensor(t.data**2)
            out.requires_grad = True
            out._parents = (t,)

            def backward(g):
                T._accumulate(t, g * 3.0 * t.data)  # wrong factor

            out._backward = backward
            return out

        report = T.gradcheck(lambda: T.reduce(bad_square(x), "sum"), [x])
        assert not report.passed


class TestDeterminism:
    @pytest.mark.parametrize("seed", range(3))
    def test_ops_bitwise_repeatable(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        a = T.conv2d(Tensor(x), Tensor(k), padding=1)
        b = T.conv2d(Tensor(x), Tensor(k), padding=1)
        assert np.array_equal(a.data, b.data)
        u = T.resample(Tensor(x), 2, "bilinear")
        v = T.resample(Tensor(x), 2, "bilinear")
        assert np.array_equal(u.data, v.data)
