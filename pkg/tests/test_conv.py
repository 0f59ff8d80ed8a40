import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tilekit.conv import (
    conv2d,
    conv2d_im2col,
    conv2d_naive,
    conv2d_tiled,
    conv2d_winograd,
    conv_flops,
    im2col,
    supports,
    tile_footprint,
    winograd_plan,
)
from tilekit.core import (
    ConvAlgo,
    ConvAlgoParams,
    ConvShape,
    Layout,
    Padding,
    Tensor4,
    max_rel_error,
)
from tilekit.errors import CapabilityError, ConfigError, ShapeError
from tilekit.gemm import KernelStats

# A fixed spread of tile/vector shapes: every draw reuses a compiled kernel.
TILED_SAMPLE = [
    ConvAlgoParams.parse(name)
    for name in (
        "tiled_1x1_v1x1", "tiled_1x1_v4x2", "tiled_2x2_v2x2", "tiled_2x3_v2x4", "tiled_3x2_v4x2",
        "tiled_4x5_v4x2", "tiled_4x4_v4x4", "tiled_5x5_v8x8", "tiled_3x1_v8x1", "tiled_1x4_v1x8",
    )
]

TOL = {ConvAlgo.TILED: 1e-4, ConvAlgo.IM2COL: 1e-5, ConvAlgo.WINOGRAD: 1e-3}


def operands(shape, rng):
    return (
        Tensor4.random(shape.input_dims, rng),
        Tensor4.random(shape.filter_dims, rng, Layout.FILTER_HWCK),
    )


def brute_force(x, f, shape):
    """Float64 correlation by explicit tap enumeration over a zero-padded input."""
    xx = x.to_array().astype(np.float64)
    ff = f.to_array().astype(np.float64)
    out = np.zeros(shape.output_dims)
    for h, w in itertools.product(range(shape.out_rows), range(shape.out_cols)):
        for a, b in itertools.product(range(shape.window_rows), range(shape.window_cols)):
            iy = h * shape.stride + a - shape.pad_top
            ix = w * shape.stride + b - shape.pad_left
            if 0 <= iy < shape.in_rows and 0 <= ix < shape.in_cols:
                out[:, h, w, :] += xx[:, iy, ix, :] @ ff[a, b]
    return out


def ones(shape):
    return (
        Tensor4(shape.input_dims, np.ones(int(np.prod(shape.input_dims)))),
        Tensor4(shape.filter_dims, np.ones(int(np.prod(shape.filter_dims))), Layout.FILTER_HWCK),
    )


conv_shapes = st.builds(
    lambda n, h, w, c, k, win, stride, pad: ConvShape(n, h, w, c, k, win, win, stride, pad),
    st.integers(1, 2), st.integers(4, 12), st.integers(4, 12), st.sampled_from([1, 3, 8]),
    st.sampled_from([1, 3, 8]), st.sampled_from([1, 3]), st.sampled_from([1, 2]),
    st.sampled_from(list(Padding)),
)


class TestNaive:
    def test_all_ones_valid(self):
        shape = ConvShape(1, 3, 3, 1, 1, 3, 3, padding=Padding.VALID)
        out = conv2d_naive(*ones(shape), shape)
        assert out.dims == (1, 1, 1, 1) and out.data[0] == 9.0

    def test_all_ones_same(self):
        shape = ConvShape(1, 3, 3, 1, 1, 3, 3)
        out = conv2d_naive(*ones(shape), shape)
        np.testing.assert_array_equal(out.to_array()[0, :, :, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_zero_filter(self, rng):
        shape = ConvShape(2, 5, 6, 3, 4, 3, 3)
        x, _ = operands(shape, rng)
        f = Tensor4(shape.filter_dims, np.zeros(3 * 3 * 3 * 4), Layout.FILTER_HWCK)
        assert not conv2d_naive(x, f, shape).data.any()

    @given(conv_shapes, st.integers(0, 2**16))
    def test_matches_brute_force(self, shape, seed):
        x, f = operands(shape, np.random.default_rng(seed))
        ref = brute_force(x, f, shape)
        assert max_rel_error(conv2d_naive(x, f, shape), ref.reshape(-1)) <= 1e-5

    def test_skipped_taps_not_counted(self):
        shape = ConvShape(1, 3, 3, 2, 1, 3, 3)
        stats = KernelStats()
        conv2d_naive(*ones(shape), shape, stats=stats)
        # Tap counts per output are 4,6,4 / 6,9,6 / 4,6,4; each tap multiplies C=2 channels.
        assert stats.multiplies == 2 * 49

    def test_shape_error(self, rng):
        shape = ConvShape(1, 4, 4, 2, 2, 3, 3)
        x, f = operands(ConvShape(1, 4, 4, 3, 2, 3, 3), rng)
        with pytest.raises(ShapeError):
            conv2d_naive(x, f, shape)


class TestTiled:
    def test_unit_tile_equals_naive(self, rng):
        shape = ConvShape(2, 9, 7, 5, 6, 3, 3)
        x, f = operands(shape, rng)
        params = ConvAlgoParams(ConvAlgo.TILED, 1, 1, 1, 1)
        assert conv2d_tiled(x, f, shape, params) == conv2d_naive(x, f, shape)

    def test_peak_point_config(self, rng):
        shape = ConvShape(1, 32, 32, 16, 16, 3, 3)
        x, f = operands(shape, rng)
        out = conv2d_tiled(x, f, shape, ConvAlgoParams.parse("tiled_4x5_v4x2"))
        assert max_rel_error(out, conv2d_naive(x, f, shape)) <= 1e-4

    def test_tile_larger_than_output(self, rng):
        shape = ConvShape(1, 3, 2, 3, 5, 3, 3, padding=Padding.SAME)
        x, f = operands(shape, rng)
        out = conv2d_tiled(x, f, shape, ConvAlgoParams.parse("tiled_5x5_v8x8"))
        assert out == conv2d_naive(x, f, shape)

    @given(conv_shapes, st.sampled_from(TILED_SAMPLE), st.integers(0, 2**16))
    def test_grid_matches_naive(self, shape, params, seed):
        x, f = operands(shape, np.random.default_rng(seed))
        out = conv2d_tiled(x, f, shape, params)
        assert max_rel_error(out, conv2d_naive(x, f, shape)) <= TOL[ConvAlgo.TILED]

    @pytest.mark.parametrize("workers", [1, 2, 5])
    def test_thread_count_invariant(self, rng, workers):
        shape = ConvShape(2, 11, 10, 4, 6, 3, 3)
        x, f = operands(shape, rng)
        params = ConvAlgoParams.parse("tiled_2x3_v2x4")
        assert conv2d_tiled(x, f, shape, params, workers=workers) == conv2d_tiled(x, f, shape, params, workers=1)

    def test_unsupported_stride(self, rng):
        shape = ConvShape(1, 9, 9, 1, 1, 3, 3, stride=3)
        x, f = operands(shape, rng)
        with pytest.raises(CapabilityError):
            conv2d_tiled(x, f, shape, ConvAlgoParams.parse("tiled_2x2_v1x1"))

    def test_non_tiled_params(self, rng):
        shape = ConvShape(1, 4, 4, 1, 1, 3, 3)
        with pytest.raises(ConfigError):
            conv2d_tiled(*operands(shape, rng), shape, ConvAlgoParams(ConvAlgo.NAIVE))

    def test_invalid_vector_width(self):
        with pytest.raises(ConfigError):
            ConvAlgoParams(ConvAlgo.TILED, 2, 2, 3, 1)

    @pytest.mark.parametrize("tr,tc", [(1, 1), (2, 2), (4, 5), (3, 1)])
    @pytest.mark.parametrize("window", [1, 3])
    def test_each_input_loaded_once_per_tile(self, rng, tr, tc, window):
        # Valid padding with sizes that tile exactly: every tile is interior.
        c = 3
        shape = ConvShape(1, 2 * tr + window - 1, 3 * tc + window - 1, c, 4, window, window,
                          padding=Padding.VALID)
        params = ConvAlgoParams(ConvAlgo.TILED, tr, tc, 4, 4)
        stats = KernelStats()
        conv2d_tiled(*operands(shape, rng), shape, params, stats=stats)
        per_tile = (tr + window - 1) * (tc + window - 1) * c
        assert tile_footprint(params, shape) == (tr + window - 1, tc + window - 1)
        assert stats.loads == 6 * per_tile
        if tr * tc > 1 and window > 1:
            assert per_tile < tr * tc * window * window * c

    def test_multiply_count_matches_naive(self, rng):
        shape = ConvShape(1, 7, 6, 5, 3, 3, 3, stride=2)
        x, f = operands(shape, rng)
        tiled, naive = KernelStats(), KernelStats()
        conv2d_tiled(x, f, shape, ConvAlgoParams.parse("tiled_3x2_v4x2"), stats=tiled)
        conv2d_naive(x, f, shape, stats=naive)
        assert tiled.multiplies == naive.multiplies


class TestIm2col:
    def test_pointwise_is_reshape(self, rng):
        shape = ConvShape(2, 3, 4, 5, 1, 1, 1)
        x, _ = operands(shape, rng)
        patches = im2col(x, shape)
        assert (patches.rows, patches.cols) == (24, 5)
        np.testing.assert_array_equal(patches.to_array(), x.to_array().reshape(24, 5))

    def test_valid_3x3_rows(self):
        shape = ConvShape(1, 4, 4, 1, 1, 3, 3, padding=Padding.VALID)
        x = Tensor4(shape.input_dims, np.arange(16))
        patches = im2col(x, shape).to_array()
        assert patches.shape == (4, 9)
        np.testing.assert_array_equal(patches[0], [0, 1, 2, 4, 5, 6, 8, 9, 10])
        np.testing.assert_array_equal(patches[3], [5, 6, 7, 9, 10, 11, 13, 14, 15])

    @given(conv_shapes)
    def test_duplication_count(self, shape):
        x = Tensor4(shape.input_dims, np.zeros(int(np.prod(shape.input_dims))))
        patches = im2col(x, shape)
        assert patches.rows * patches.cols == (
            shape.batch * shape.out_rows * shape.out_cols
            * shape.window_rows * shape.window_cols * shape.channels
        )

    @given(conv_shapes, st.integers(0, 2**16))
    def test_matches_oracle(self, shape, seed):
        x, f = operands(shape, np.random.default_rng(seed))
        assert max_rel_error(conv2d_im2col(x, f, shape), conv2d_naive(x, f, shape)) <= 1e-5

    def test_pointwise_single_channel_scales(self, rng):
        shape = ConvShape(1, 5, 5, 1, 1, 1, 1)
        x, _ = operands(shape, rng)
        f = Tensor4(shape.filter_dims, [2.5], Layout.FILTER_HWCK)
        np.testing.assert_array_equal(conv2d_im2col(x, f, shape).data, np.float32(2.5) * x.data)

    def test_batch_is_concatenation(self, rng):
        shape2 = ConvShape(2, 6, 6, 3, 4, 3, 3)
        shape1 = ConvShape(1, 6, 6, 3, 4, 3, 3)
        x, f = operands(shape2, rng)
        both = conv2d_im2col(x, f, shape2).to_array()
        for i in range(2):
            xi = Tensor4(shape1.input_dims, x.to_array()[i])
            np.testing.assert_array_equal(both[i], conv2d_im2col(xi, f, shape1).to_array()[0])


class TestWinogradPlan:
    def test_f23_matrices(self):
        p = winograd_plan(2, 2, 3, 3)
        np.testing.assert_array_equal(p.bt, [[1, 0, -1, 0], [0, 1, 1, 0], [0, -1, 1, 0], [0, 1, 0, -1]])
        np.testing.assert_array_equal(p.g, [[1, 0, 0], [0.5, 0.5, 0.5], [0.5, -0.5, 0.5], [0, 0, 1]])
        np.testing.assert_array_equal(p.at, [[1, 1, 1, 0], [0, 1, -1, -1]])

    def test_input_tiles(self):
        assert winograd_plan(2, 2, 3, 3).input_tile == (4, 4)
        assert winograd_plan(4, 4, 3, 3).input_tile == (6, 6)
        assert winograd_plan(2, 1, 3, 1).input_tile == (4, 1)

    def test_central_tap_passes_input(self, rng):
        d = rng.standard_normal(4)
        np.testing.assert_allclose(winograd_plan(2, 2, 3, 3).rows.apply(d, [0, 1, 0]), d[1:3], atol=1e-12)

    @pytest.mark.parametrize("m,n,r,s", [(2, 2, 3, 3), (4, 4, 3, 3), (2, 1, 3, 1), (1, 2, 1, 3),
                                         (2, 2, 1, 1), (4, 2, 3, 3), (1, 1, 3, 3)])
    def test_transform_identity(self, rng, m, n, r, s):
        plan = winograd_plan(m, n, r, s)
        ar, ac = plan.input_tile
        for _ in range(100):
            d = rng.uniform(-1, 1, (ar, ac))
            g = rng.uniform(-1, 1, (r, s))
            direct = np.array([[np.sum(d[i:i + r, j:j + s] * g) for j in range(n)] for i in range(m)])
            np.testing.assert_allclose(plan.apply(d, g), direct, atol=1e-5)
            for axis in (plan.rows, plan.cols):
                dv = rng.uniform(-1, 1, axis.alpha)
                gv = rng.uniform(-1, 1, axis.r)
                np.testing.assert_allclose(axis.apply(dv, gv), np.correlate(dv, gv, "valid"), atol=1e-5)

    def test_all_ones_tile_transform(self):
        v = winograd_plan(2, 2, 3, 3).transform_input(np.ones((4, 4)))
        expected = np.zeros((4, 4))
        expected[1, 1] = 4
        np.testing.assert_array_equal(v, expected)

    @pytest.mark.parametrize("m,r", [(3, 3), (2, 5), (6, 3), (2, 7)])
    def test_unsupported(self, m, r):
        with pytest.raises(CapabilityError):
            winograd_plan(m, m, r, r)


class TestWinograd:
    def test_random_same(self, rng):
        shape = ConvShape(1, 8, 8, 4, 4, 3, 3)
        x, f = operands(shape, rng)
        out = conv2d_winograd(x, f, shape, winograd_plan(2, 2, 3, 3))
        assert max_rel_error(out, conv2d_naive(x, f, shape)) <= 1e-3

    @given(conv_shapes, st.sampled_from([(2, 2), (4, 4)]), st.integers(0, 2**16))
    def test_grid_matches_naive(self, shape, tile, seed):
        if shape.stride != 1:
            shape = ConvShape(shape.batch, shape.in_rows, shape.in_cols, shape.channels,
                              shape.features, shape.window_rows, shape.window_cols, 1, shape.padding)
        x, f = operands(shape, np.random.default_rng(seed))
        plan = winograd_plan(*tile, shape.window_rows, shape.window_cols)
        out = conv2d_winograd(x, f, shape, plan)
        assert max_rel_error(out, conv2d_naive(x, f, shape)) <= 1e-3

    def test_stride_two_rejected(self, rng):
        shape = ConvShape(1, 8, 8, 1, 1, 3, 3, stride=2)
        with pytest.raises(CapabilityError):
            conv2d_winograd(*operands(shape, rng), shape, winograd_plan(2, 2, 3, 3))

    def test_window_mismatch(self, rng):
        shape = ConvShape(1, 8, 8, 1, 1, 1, 1)
        with pytest.raises(CapabilityError):
            conv2d_winograd(*operands(shape, rng), shape, winograd_plan(2, 2, 3, 3))

    @pytest.mark.parametrize("m,size,direct_per_tile,wino_per_tile", [(2, 8, 36, 16), (4, 10, 144, 36)])
    def test_multiply_accounting(self, rng, m, size, direct_per_tile, wino_per_tile):
        shape = ConvShape(1, size, size, 1, 1, 3, 3, padding=Padding.VALID)
        x, f = operands(shape, rng)
        wino, naive = KernelStats(), KernelStats()
        conv2d_winograd(x, f, shape, winograd_plan(m, m, 3, 3), stats=wino)
        conv2d_naive(x, f, shape, stats=naive)
        tiles = (shape.out_rows // m) * (shape.out_cols // m)
        assert wino.multiplies == tiles * wino_per_tile
        assert naive.multiplies == tiles * direct_per_tile


class TestDispatchAndFlops:
    def test_flops_pointwise(self):
        assert conv_flops(ConvShape(1, 56, 56, 64, 64, 1, 1)) == 25_690_112

    def test_flops_vgg_first_layer(self):
        assert conv_flops(ConvShape(1, 224, 224, 3, 64, 3, 3)) == 173_408_256

    def test_stride_two_quarters_flops(self):
        one = conv_flops(ConvShape(1, 16, 16, 4, 4, 3, 3))
        two = conv_flops(ConvShape(1, 16, 16, 4, 4, 3, 3, stride=2))
        assert one == 4 * two

    @pytest.mark.parametrize("name", ["naive", "tiled_2x2_v2x2", "im2col", "winograd_2x2"])
    def test_conv2d_dispatch(self, rng, name):
        shape = ConvShape(1, 6, 6, 2, 3, 3, 3)
        x, f = operands(shape, rng)
        params = ConvAlgoParams.parse(name)
        tol = TOL.get(params.algo, 0.0)
        assert max_rel_error(conv2d(x, f, shape, params), conv2d_naive(x, f, shape)) <= tol

    def test_supports(self):
        s2 = ConvShape(1, 8, 8, 1, 1, 3, 3, stride=2)
        assert not supports(ConvAlgoParams(ConvAlgo.WINOGRAD, 2, 2), s2)
        assert supports(ConvAlgoParams.parse("tiled_2x2_v1x1"), s2)
        s7 = ConvShape(1, 8, 8, 1, 1, 7, 7)
        assert not supports(ConvAlgoParams(ConvAlgo.WINOGRAD, 2, 2), s7)

    @pytest.mark.parametrize("name", ["naive", "tiled_3x2_v4x2", "im2col", "winograd_2x2"])
    def test_batch_permutation(self, rng, name):
        shape = ConvShape(3, 7, 6, 3, 4, 3, 3)
        x, f = operands(shape, rng)
        params = ConvAlgoParams.parse(name)
        perm = [2, 0, 1]
        xp = Tensor4(shape.input_dims, x.to_array()[perm])
        out = conv2d(x, f, shape, params).to_array()
        outp = conv2d(xp, f, shape, params).to_array()
        np.testing.assert_array_equal(outp, out[perm])
