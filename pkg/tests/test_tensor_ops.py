"""Forward-op contracts for the tensor engine, checked against loop oracles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radarkit import tensor as T
from radarkit.errors import ConfigError, ShapeError

from oracles import conv2d_loops, conv3d_loops, matmul_loops


def rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


class TestCreate:
    def test_zeros(self):
        t = T.zeros((2, 3))
        assert t.shape == (2, 3)
        assert np.array_equal(t.data, np.zeros((2, 3)))

    def test_constant_fill(self):
        t = T.full((4,), 1.5)
        assert np.array_equal(t.data, np.array([1.5] * 4))

    def test_seeded_uniform_bit_identical(self):
        a = T.uniform((8,), 42, -1, 1)
        b = T.uniform((8,), 42, -1, 1)
        assert a.data.tobytes() == b.data.tobytes()

    def test_different_seed_differs(self):
        a = T.uniform((8,), 42, -1, 1)
        b = T.uniform((8,), 43, -1, 1)
        assert not np.array_equal(a.data, b.data)

    @pytest.mark.parametrize("shape", [(0,), (2, 0), (-1, 3)])
    def test_bad_extent_rejected(self, shape):
        with pytest.raises(ShapeError):
            T.zeros(shape)


class TestMatmul:
    def test_identity(self):
        i2 = T.from_array(np.eye(2))
        m = T.from_array(np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert np.array_equal(T.matmul(i2, m).data, m.data)

    def test_hand_case(self):
        a = T.from_array(np.array([[1.0, 2.0]]))
        b = T.from_array(np.array([[3.0], [4.0]]))
        assert T.matmul(a, b).data[0, 0] == 11.0

    def test_vs_loop_oracle(self):
        r = rng(0)
        a = r.standard_normal((5, 4))
        b = r.standard_normal((4, 3))
        got = T.matmul(T.from_array(a), T.from_array(b)).data
        want = matmul_loops(a, b)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_batched_broadcast(self):
        r = rng(1)
        a = r.standard_normal((3, 2, 5, 4))
        b = r.standard_normal((4, 6))
        got = T.matmul(T.from_array(a), T.from_array(b)).data
        assert got.shape == (3, 2, 5, 6)
        for i in range(3):
            for j in range(2):
                want = matmul_loops(a[i, j], b)
                assert np.max(np.abs(got[i, j] - want)) < 1e-12

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(T.zeros((2, 3)), T.zeros((4, 2)))


class TestConv2d:
    def test_1x1_kernel_is_channel_mix(self):
        r = rng(2)
        x = r.standard_normal((2, 2, 4, 4))
        w = np.array([[[[1.0]], [[0.0]]], [[[0.0]], [[1.0]]]])  # identity mix
        out = T.conv2d(T.from_array(x), T.from_array(w)).data
        assert np.allclose(out, x)

    def test_ones_kernel_constant_image(self):
        c, cin = 0.7, 3
        x = T.full((1, cin, 6, 6), c)
        w = T.full((1, cin, 3, 3), 1.0)
        out = T.conv2d(x, w, padding=1).data
        assert np.allclose(out[0, 0, 1:-1, 1:-1], 9 * c * cin)

    @pytest.mark.parametrize("seed,stride,padding", [(3, 1, 0), (4, 2, 1), (5, 1, 2), (6, 3, 1)])
    def test_vs_loop_oracle(self, seed, stride, padding):
        r = rng(seed)
        x = r.standard_normal((2, 3, 7, 7))
        w = r.standard_normal((4, 3, 3, 3))
        b = r.standard_normal(4)
        try:
            got = T.conv2d(T.from_array(x), T.from_array(w), T.from_array(b),
                           stride=stride, padding=padding).data
        except ShapeError:
            pytest.skip("non-integral output for this stride/pad combo")
        want = conv2d_loops(x, w, b, (stride, stride), (padding, padding))
        assert np.max(np.abs(got - want)) < 1e-10

    def test_non_integral_output_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(T.zeros((1, 1, 8, 8)), T.zeros((1, 1, 3, 3)), stride=2, padding=1)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(T.zeros((1, 1, 8, 8)), T.zeros((1, 1, 4, 4)))


class TestConv3d:
    def test_111_kernel_is_channel_mix(self):
        r = rng(7)
        x = r.standard_normal((1, 2, 3, 4, 4))
        w = r.standard_normal((3, 2, 1, 1, 1))
        out = T.conv3d(T.from_array(x), T.from_array(w)).data
        want = np.einsum("bcthw,oc->bothw", x, w[:, :, 0, 0, 0])
        assert np.allclose(out, want)

    def test_stride2_halves_even_t(self):
        x = T.zeros((1, 2, 8, 5, 5))
        w = T.zeros((2, 2, 2, 3, 3))
        out = T.conv3d(x, w, stride=(2, 1, 1), padding=(0, 1, 1))
        assert out.shape == (1, 2, 4, 5, 5)

    @pytest.mark.parametrize("seed,stride,padding", [(8, (1, 1, 1), (0, 0, 0)), (9, (2, 1, 1), (0, 1, 1)), (10, (1, 2, 2), (1, 1, 1))])
    def test_vs_loop_oracle(self, seed, stride, padding):
        r = rng(seed)
        x = r.standard_normal((1, 2, 4, 5, 5))
        w = r.standard_normal((3, 2, 2, 3, 3))
        b = r.standard_normal(3)
        try:
            got = T.conv3d(T.from_array(x), T.from_array(w), T.from_array(b),
                           stride=stride, padding=padding).data
        except ShapeError:
            pytest.skip("non-integral output for this stride/pad combo")
        want = conv3d_loops(x, w, b, stride, padding)
        assert np.max(np.abs(got - want)) < 1e-10


class TestSoftmax:
    def test_uniform_logits(self):
        out = T.softmax(T.from_array(np.array([1.0, 1.0, 1.0, 1.0])), axis=0).data
        assert np.allclose(out, 0.25)

    def test_ln2_case(self):
        out = T.softmax(T.from_array(np.array([0.0, np.log(2.0)])), axis=0).data
        assert abs(out[0] - 1 / 3) < 1e-15
        assert abs(out[1] - 2 / 3) < 1e-15

    @given(st.lists(st.integers(-512, 512), min_size=2, max_size=8),
           st.integers(-512, 512))
    @settings(max_examples=100, deadline=None)
    def test_shift_invariance_bitwise(self, xs, c):
        # sixty-fourths keep every sum exactly representable, so the
        # max-subtracted logits are bit-identical with and without the shift
        x = np.array(xs, dtype=np.float64) / 64.0
        shifted = x + c / 64.0
        a = T.softmax(T.from_array(x), axis=0).data
        b = T.softmax(T.from_array(shifted), axis=0).data
        assert a.tobytes() == b.tobytes()

    @given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=16))
    @settings(max_examples=200, deadline=None)
    def test_rows_sum_to_one(self, xs):
        x = np.array(xs, dtype=np.float64)
        out = T.softmax(T.from_array(x), axis=0).data
        assert abs(out.sum() - 1.0) < 1e-12

    def test_axis_out_of_bounds(self):
        with pytest.raises(ShapeError):
            T.softmax(T.zeros((2, 2)), axis=5)


class TestNormalize:
    def test_constant_input_zero_before_affine(self):
        x = T.full((2, 5), 3.7)
        g = T.full((5,), 1.0)
        b = T.zeros((5,))
        out = T.normalize(x, g, b, axes=-1, eps=1e-5).data
        assert np.allclose(out, 0.0)

    def test_two_point_case(self):
        x = T.from_array(np.array([[-1.0, 1.0]]))
        g = T.full((2,), 1.0)
        b = T.zeros((2,))
        out = T.normalize(x, g, b, axes=-1, eps=1e-12).data
        assert np.allclose(out, [[-1.0, 1.0]], atol=1e-6)

    def test_group_mean_near_zero(self):
        r = rng(11)
        x = T.from_array(r.standard_normal((4, 16)))
        g = T.full((16,), 1.0)
        b = T.zeros((16,))
        out = T.normalize(x, g, b, axes=-1, eps=1e-9).data
        assert np.max(np.abs(out.mean(axis=-1))) < 1e-7
        assert np.max(np.abs(out.var(axis=-1) - 1.0)) < 1e-6

    def test_bad_eps(self):
        with pytest.raises(ConfigError):
            T.normalize(T.zeros((2, 2)), T.full((2,), 1.0), T.zeros((2,)), axes=-1, eps=0.0)


class TestActivations:
    def test_relu_values(self):
        out = T.relu(T.from_array(np.array([-2.0, 3.0]))).data
        assert np.array_equal(out, [0.0, 3.0])

    def test_sigmoid_zero(self):
        assert T.sigmoid(T.from_array(np.array(0.0))).item() == 0.5

    def test_sigmoid_open_interval(self):
        out = T.sigmoid(T.from_array(np.array([-1e4, 0.0, 1e4]))).data
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_gelu_vs_erf_oracle(self):
        import mpmath

        xs = np.linspace(-6, 6, 100)
        got = T.gelu(T.from_array(xs)).data
        want = np.array(
            [float(0.5 * mpmath.mpf(x) * (1 + mpmath.erf(mpmath.mpf(x) / mpmath.sqrt(2)))) for x in xs]
        )
        assert np.max(np.abs(got - want)) < 1e-7

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            T.activation(T.zeros((1,)), "tanh")


class TestEwise:
    def test_additive_identity(self):
        a = T.uniform((3, 4), 12)
        out = T.add(a, T.zeros((3, 4)))
        assert np.array_equal(out.data, a.data)

    def test_multiplicative_identity(self):
        a = T.uniform((3, 4), 13)
        out = T.mul(a, T.full((3, 4), 1.0))
        assert np.array_equal(out.data, a.data)

    def test_add_vs_loop(self):
        r = rng(14)
        a, b = r.standard_normal((2, 3)), r.standard_normal((2, 3))
        got = T.add(T.from_array(a), T.from_array(b)).data
        want = np.array([[a[i, j] + b[i, j] for j in range(3)] for i in range(2)])
        assert np.max(np.abs(got - want)) < 1e-15

    def test_no_broadcasting(self):
        with pytest.raises(ShapeError):
            T.add(T.zeros((2, 3)), T.zeros((3,)))
        with pytest.raises(ShapeError):
            T.mul(T.zeros((2, 3)), T.zeros((2, 1)))


class TestDataMovement:
    def test_reshape_round_trip(self):
        a = T.uniform((2, 3), 15)
        back = T.reshape(T.reshape(a, (3, 2)), (2, 3))
        assert back.data.tobytes() == a.data.tobytes()

    def test_reshape_count_mismatch(self):
        with pytest.raises(ShapeError):
            T.reshape(T.zeros((2, 3)), (4, 2))

    def test_pad_then_crop_identity(self):
        a = T.uniform((1, 2, 4, 4), 16)
        padded = T.pad(a, [(0, 0), (0, 0), (1, 1), (1, 1)])
        assert padded.shape == (1, 2, 6, 6)
        back = T.crop(padded, [(0, 1), (0, 2), (1, 5), (1, 5)])
        assert back.data.tobytes() == a.data.tobytes()

    def test_permute_is_contiguous(self):
        a = T.uniform((2, 3, 4), 17)
        p = T.permute(a, (2, 0, 1))
        assert p.data.flags["C_CONTIGUOUS"]
        assert p.shape == (4, 2, 3)

    def test_repeat_axis(self):
        a = T.from_array(np.array([[1.0, 2.0]]))
        out = T.repeat(a, axis=1, factor=3)
        assert np.array_equal(out.data, [[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]])


class TestPartitions:
    def test_window_shape(self):
        x = T.uniform((1, 4, 8, 8), 18)
        tok = T.window_partition(x, 4)
        assert tok.shape == (4, 16, 4)

    def test_window_degenerate_single_window(self):
        x = T.from_array(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
        tok = T.window_partition(x, 4)
        assert tok.shape == (1, 16, 1)
        assert np.array_equal(tok.data[0, :, 0], np.arange(16))

    def test_grid_hand_case(self):
        x = T.from_array(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
        tok = T.grid_partition(x, 2)
        assert tok.shape == (4, 4, 1)
        assert np.array_equal(tok.data[0, :, 0], [0.0, 2.0, 8.0, 10.0])

    def test_grid_degenerate_flatten(self):
        x = T.from_array(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
        tok = T.grid_partition(x, 1)
        assert tok.shape == (16, 1, 1)

    @pytest.mark.parametrize("hw", [4, 7, 8, 16, 32])
    @pytest.mark.parametrize("p", [1, 2, 4, 7, 8])
    def test_window_round_trip_lattice(self, hw, p):
        x = T.uniform((2, 3, hw, hw), 1000 + hw * 10 + p)
        tok = T.window_partition(x, p)
        back = T.window_reverse(tok, p, 2, 3, hw, hw)
        assert back.data.tobytes() == x.data.tobytes()

    @pytest.mark.parametrize("hw", [4, 7, 8, 16, 32])
    @pytest.mark.parametrize("g", [1, 2, 4, 7, 8])
    def test_grid_round_trip_lattice(self, hw, g):
        x = T.uniform((2, 3, hw, hw), 2000 + hw * 10 + g)
        tok = T.grid_partition(x, g)
        back = T.grid_reverse(tok, g, 2, 3, hw, hw)
        assert back.data.tobytes() == x.data.tobytes()

    @given(st.integers(3, 20), st.integers(3, 20), st.integers(1, 9))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_property(self, h, w, p):
        x = T.uniform((1, 2, h, w), h * 391 + w * 17 + p)
        wtok = T.window_partition(x, p)
        assert T.window_reverse(wtok, p, 1, 2, h, w).data.tobytes() == x.data.tobytes()
        gtok = T.grid_partition(x, p)
        assert T.grid_reverse(gtok, p, 1, 2, h, w).data.tobytes() == x.data.tobytes()

    def test_nonpositive_size_rejected(self):
        with pytest.raises(ConfigError):
            T.window_partition(T.zeros((1, 1, 4, 4)), 0)
        with pytest.raises(ConfigError):
            T.grid_partition(T.zeros((1, 1, 4, 4)), -2)


class TestPrecisionModes:
    def test_float32_mode(self):
        with T.using_dtype(np.float32):
            a = T.uniform((3, 3), 19)
            assert a.dtype == np.float32
            out = T.matmul(a, a)
            assert out.dtype == np.float32

    def test_mixed_dtype_rejected(self):
        a = T.uniform((2, 2), 20)
        with T.using_dtype(np.float32):
            b = T.uniform((2, 2), 21)
        with pytest.raises(ShapeError):
            T.add(a, b)

    def test_determinism_same_seed(self):
        def run():
            x = T.uniform((2, 3, 8, 8), 5)
            w = T.uniform((4, 3, 3, 3), 6)
            return T.conv2d(x, w, padding=1).data.tobytes()

        assert run() == run()
