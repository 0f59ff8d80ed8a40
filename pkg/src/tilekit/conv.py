"""2-D convolution: naive oracle, register-tiled, im2col-lowered and Winograd.

Inputs are NHWC, filters HWCK, outputs NHWC with features innermost.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _conv_kernels as _k
from .core import (
    DTYPE,
    ConvAlgo,
    ConvAlgoParams,
    ConvShape,
    DeviceSpec,
    GemmConfig,
    GemmShape,
    Matrix,
    Op,
    Tensor4,
)
from .errors import CapabilityError, ConfigError, ShapeError
from .gemm import DEFAULT_CONFIG, KernelStats, gemm_strided_batched, gemm_tiled

TILED_STRIDES = (1, 2)


def conv_flops(shape: ConvShape) -> int:
    return (
        2 * shape.batch * shape.out_rows * shape.out_cols * shape.features
        * shape.window_rows * shape.window_cols * shape.channels
    )


def _geometry(shape: ConvShape) -> tuple[int, ...]:
    return (
        shape.batch, shape.in_rows, shape.in_cols, shape.channels, shape.features,
        shape.window_rows, shape.window_cols, shape.out_rows, shape.out_cols,
        shape.stride, shape.pad_top, shape.pad_left,
    )


def _output(shape: ConvShape, data: np.ndarray) -> Tensor4:
    return Tensor4(shape.output_dims, data)


def conv2d_naive(inp: Tensor4, flt: Tensor4, shape: ConvShape, *,
                 stats: KernelStats | None = None) -> Tensor4:
    """Direct seven-loop convolution; each output accumulates taps in (x, y, c) order.

    Taps that fall in the padding are skipped rather than multiplied by zero.
    """
    shape.check_operands(inp, flt)
    nb, hh, ww, cc, kk, rr, ss, oh, ow, st, pt, pl = _geometry(shape)
    out = np.empty(math.prod(shape.output_dims), DTYPE)
    mults = _k.conv_naive_kernel(inp.data, flt.data, out, nb, hh, ww, cc, kk, rr, ss,
                                 oh, ow, st, pt, pl)
    if stats is not None:
        stats.multiplies += mults
        stats.launches += 1
    return _output(shape, out)


# --------------------------------------------------------------------------- tiled


def tile_footprint(params: ConvAlgoParams, shape: ConvShape) -> tuple[int, int]:
    """Input rows and columns one thread's output tile reads."""
    st = shape.stride
    return (
        (params.tile_rows - 1) * st + shape.window_rows,
        (params.tile_cols - 1) * st + shape.window_cols,
    )


def tiled_task_count(params: ConvAlgoParams, shape: ConvShape) -> int:
    return (
        shape.batch
        * -(-shape.out_rows // params.tile_rows)
        * -(-shape.out_cols // params.tile_cols)
        * -(-shape.features // params.feature_vector)
    )


def conv2d_tiled(
    inp: Tensor4,
    flt: Tensor4,
    shape: ConvShape,
    params: ConvAlgoParams,
    *,
    workers: int | None = None,
    stats: KernelStats | None = None,
) -> Tensor4:
    """Each logical thread computes a ``tile_rows x tile_cols`` output tile for
    ``feature_vector`` consecutive features.

    The thread copies the input footprint of its tile into a private patch,
    so every input element it needs is loaded once.  It then visits filter
    taps in (x, y, channel-group) order, loads a ``channel_vector x
    feature_vector`` filter block and applies it to the whole tile.
    Accumulation order per output matches the naive kernel.
    """
    if params.algo is not ConvAlgo.TILED:
        raise ConfigError(f"conv2d_tiled needs tiled parameters, got {params.name}")
    if shape.stride not in TILED_STRIDES:
        raise CapabilityError(f"tiled convolution supports strides {TILED_STRIDES}, got {shape.stride}")
    shape.check_operands(inp, flt)
    nb, hh, ww, cc, kk, rr, ss, oh, ow, st, pt, pl = _geometry(shape)
    kern = _k.tiled_kernel(params.tile_rows, params.tile_cols,
                           params.channel_vector, params.feature_vector)
    prow, pcol = tile_footprint(params, shape)
    out = np.empty(math.prod(shape.output_dims), DTYPE)
    n_tasks = tiled_task_count(params, shape)

    def run(lo: int, hi: int) -> tuple[int, int]:
        patch = np.empty(prow * pcol * cc, DTYPE)
        return kern(inp.data, flt.data, out, nb, hh, ww, cc, kk, rr, ss, oh, ow, st, pt, pl,
                    patch, lo, hi)

    workers = workers or max(1, min(os.cpu_count() or 1, n_tasks))
    if workers <= 1:
        mults, loads = run(0, n_tasks)
    else:
        per = -(-n_tasks // workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda lo: run(lo, min(n_tasks, lo + per)), range(0, n_tasks, per)))
        mults = sum(p[0] for p in parts)
        loads = sum(p[1] for p in parts)
    if stats is not None:
        stats.multiplies += mults
        stats.loads += loads
        stats.launches += 1
    return _output(shape, out)


# --------------------------------------------------------------------------- im2col


def im2col(inp: Tensor4, shape: ConvShape) -> Matrix:
    """Patch matrix with one row per output position and one column per filter tap.

    Rows run over (batch, out_row, out_col); columns over (x, y, c), matching
    the row-major layout of an HWCK filter viewed as ``(R*S*C) x K``.
    """
    if inp.dims != shape.input_dims:
        raise ShapeError(f"input tensor is {inp.dims}, expected {shape.input_dims}")
    nb, hh, ww, cc, _, rr, ss, oh, ow, st, pt, pl = _geometry(shape)
    rows = nb * oh * ow
    cols = rr * ss * cc
    patches = np.empty(rows * cols, DTYPE)
    _k.im2col_kernel(inp.data, patches, nb, hh, ww, cc, rr, ss, oh, ow, st, pt, pl)
    return Matrix(rows, cols, patches)


def conv2d_im2col(
    inp: Tensor4,
    flt: Tensor4,
    shape: ConvShape,
    config: GemmConfig | None = None,
    device: DeviceSpec | None = None,
    *,
    stats: KernelStats | None = None,
) -> Tensor4:
    """Lower to ``patches @ filter`` and run it through the tiled GEMM.

    ``config`` defaults to ``gemm.DEFAULT_CONFIG``; callers with a tuning
    database pass its preferred configuration instead.
    """
    shape.check_operands(inp, flt)
    patches = im2col(inp, shape)
    taps = patches.cols
    k = shape.features
    # HWCK data is a row-major (taps x K) matrix, i.e. a column-major K x taps one.
    fmat = Matrix(k, taps, flt.data)
    gshape = GemmShape(patches.rows, k, taps, op_b=Op.TRANSPOSE)
    res = gemm_tiled(patches, fmat, Matrix.zeros(patches.rows, k), gshape,
                     config or DEFAULT_CONFIG, device, stats=stats)
    return _output(shape, np.ascontiguousarray(res.to_array()).reshape(-1))


# --------------------------------------------------------------------------- Winograd


@dataclass(frozen=True, eq=False)
class Transform1D:
    """Minimal-filtering transform F(m, r): ``y = at @ ((g @ filter) * (bt @ d))``."""

    m: int
    r: int
    bt: np.ndarray
    g: np.ndarray
    at: np.ndarray

    @property
    def alpha(self) -> int:
        return self.m + self.r - 1

    def apply(self, d, g) -> np.ndarray:
        d = np.asarray(d, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        return self.at @ ((self.g @ g) * (self.bt @ d))


def _f23() -> Transform1D:
    bt = [[1, 0, -1, 0], [0, 1, 1, 0], [0, -1, 1, 0], [0, 1, 0, -1]]
    g = [[1, 0, 0], [0.5, 0.5, 0.5], [0.5, -0.5, 0.5], [0, 0, 1]]
    at = [[1, 1, 1, 0], [0, 1, -1, -1]]
    return Transform1D(2, 3, np.array(bt, float), np.array(g, float), np.array(at, float))


def _f43() -> Transform1D:
    bt = [
        [4, 0, -5, 0, 1, 0],
        [0, -4, -4, 1, 1, 0],
        [0, 4, -4, -1, 1, 0],
        [0, -2, -1, 2, 1, 0],
        [0, 2, -1, -2, 1, 0],
        [0, 4, 0, -5, 0, 1],
    ]
    g = [
        [1 / 4, 0, 0],
        [-1 / 6, -1 / 6, -1 / 6],
        [-1 / 6, 1 / 6, -1 / 6],
        [1 / 24, 1 / 12, 1 / 6],
        [1 / 24, -1 / 12, 1 / 6],
        [0, 0, 1],
    ]
    at = [[1, 1, 1, 1, 1, 0], [0, 1, -1, 2, -2, 0], [0, 1, 1, 4, 4, 0], [0, 1, -1, 8, -8, 1]]
    return Transform1D(4, 3, np.array(bt, float), np.array(g, float), np.array(at, float))


def _pointwise(m: int) -> Transform1D:
    # A 1-tap window: every output is one product, so all transforms are identities.
    eye = np.eye(m)
    return Transform1D(m, 1, eye, np.ones((m, 1)), eye)


def _single_output(r: int) -> Transform1D:
    # One output per tile: the element-wise product is the dot product itself.
    return Transform1D(1, r, np.eye(r), np.eye(r), np.ones((1, r)))


def _transform_1d(m: int, r: int) -> Transform1D:
    if (m, r) == (2, 3):
        return _f23()
    if (m, r) == (4, 3):
        return _f43()
    if r == 1 and m in (1, 2, 4):
        return _pointwise(m)
    if m == 1 and r == 3:
        return _single_output(r)
    raise CapabilityError(f"no Winograd transform for output {m} with window {r}")


SUPPORTED_AXES = ((2, 3), (4, 3), (1, 1), (2, 1), (4, 1), (1, 3))


@dataclass(frozen=True, eq=False)
class WinogradPlan:
    """Transforms for an ``M x N`` output tile and ``R x S`` window.

    The 2-D transform nests a row-axis and a column-axis 1-D transform.
    ``bt``, ``g`` and ``at`` expose the row-axis matrices, which are also the
    column-axis ones whenever the plan is square.
    """

    rows: Transform1D
    cols: Transform1D

    @property
    def out_tile(self) -> tuple[int, int]:
        return self.rows.m, self.cols.m

    @property
    def window(self) -> tuple[int, int]:
        return self.rows.r, self.cols.r

    @property
    def input_tile(self) -> tuple[int, int]:
        return self.rows.alpha, self.cols.alpha

    @property
    def bt(self) -> np.ndarray:
        return self.rows.bt

    @property
    def g(self) -> np.ndarray:
        return self.rows.g

    @property
    def at(self) -> np.ndarray:
        return self.rows.at

    def transform_input(self, d: np.ndarray) -> np.ndarray:
        """``Bt d B`` for a single input tile."""
        return self.rows.bt @ np.asarray(d, float) @ self.cols.bt.T

    def transform_filter(self, f: np.ndarray) -> np.ndarray:
        return self.rows.g @ np.asarray(f, float) @ self.cols.g.T

    def transform_output(self, m: np.ndarray) -> np.ndarray:
        return self.rows.at @ np.asarray(m, float) @ self.cols.at.T

    def apply(self, d, f) -> np.ndarray:
        """Valid correlation of one input tile with one filter, via the transforms."""
        return self.transform_output(self.transform_filter(f) * self.transform_input(d))


def winograd_plan(m: int, n: int, r: int, s: int) -> WinogradPlan:
    return WinogradPlan(_transform_1d(m, r), _transform_1d(n, s))


def conv2d_winograd(
    inp: Tensor4,
    flt: Tensor4,
    shape: ConvShape,
    plan: WinogradPlan,
    config: GemmConfig | None = None,
    device: DeviceSpec | None = None,
    *,
    stats: KernelStats | None = None,
) -> Tensor4:
    """Winograd convolution as transform, batched GEMM, inverse transform.

    Element (a, b) of every transformed input tile is gathered into one
    ``tiles x C`` matrix, which multiplies the ``C x K`` matrix of element
    (a, b) of every transformed filter.  The ``alpha_r * alpha_c``
    products run through the strided-batch GEMM entry point; ``stats``
    therefore counts exactly the element-wise multiplies.
    """
    if shape.stride != 1:
        raise CapabilityError("Winograd convolution requires stride 1")
    if plan.window != (shape.window_rows, shape.window_cols):
        raise CapabilityError(
            f"plan window {plan.window} does not match filter "
            f"{shape.window_rows}x{shape.window_cols}"
        )
    shape.check_operands(inp, flt)
    nb, hh, ww, cc, kk, rr, ss, oh, ow, _, pt, pl = _geometry(shape)
    tm, tn = plan.out_tile
    ar, ac = plan.input_tile
    th, tw = -(-oh // tm), -(-ow // tn)
    ntiles = nb * th * tw
    f32 = lambda a: np.asarray(a, dtype=DTYPE)  # noqa: E731

    # Stage 1: filter transform, one (ar x ac) matrix per (c, k).
    u = np.einsum("ax,xyck,by->abck", f32(plan.rows.g), flt.to_array(), f32(plan.cols.g))

    # Stage 2: input transform of overlapping (ar x ac) tiles with stride (tm, tn).
    hp, wp = th * tm + rr - 1, tw * tn + ss - 1
    x = np.zeros((nb, hp, wp, cc), DTYPE)
    src = inp.to_array()[:, : hp - pt, : wp - pl, :]
    x[:, pt : pt + src.shape[1], pl : pl + src.shape[2], :] = src
    win = np.lib.stride_tricks.sliding_window_view(x, (ar, ac), axis=(1, 2))[:, ::tm, ::tn]
    v = np.einsum("ai,nhwcij,bj->abnhwc", f32(plan.rows.bt), win, f32(plan.cols.bt))

    # Stage 3: ar*ac independent (tiles x C) @ (C x K) products, column-major operands.
    nmat = ar * ac
    a_ops = v.reshape(nmat, ntiles, cc).transpose(0, 2, 1).reshape(nmat, -1)
    b_ops = u.reshape(nmat, cc, kk).transpose(0, 2, 1).reshape(nmat, -1)
    gshape = GemmShape(ntiles, kk, cc)
    prod = gemm_strided_batched(a_ops, b_ops, np.zeros((nmat, ntiles * kk), DTYPE), gshape,
                                config or DEFAULT_CONFIG, device, stats=stats)

    # Stage 4: inverse transform and crop of the padded tile grid.
    mt = prod.reshape(ar, ac, kk, nb, th, tw)
    y = np.einsum("ia,abknhw,jb->nhiwjk", f32(plan.rows.at), mt, f32(plan.cols.at))
    y = y.reshape(nb, th * tm, tw * tn, kk)[:, :oh, :ow, :]
    return _output(shape, np.ascontiguousarray(y, dtype=DTYPE).reshape(-1))


# --------------------------------------------------------------------------- dispatch


def conv2d(
    inp: Tensor4,
    flt: Tensor4,
    shape: ConvShape,
    params: ConvAlgoParams | None = None,
    *,
    gemm_config: GemmConfig | None = None,
    device: DeviceSpec | None = None,
    stats: KernelStats | None = None,
) -> Tensor4:
    """Run the algorithm named by ``params`` (naive when omitted)."""
    params = params or ConvAlgoParams()
    if params.algo is ConvAlgo.NAIVE:
        return conv2d_naive(inp, flt, shape, stats=stats)
    if params.algo is ConvAlgo.TILED:
        return conv2d_tiled(inp, flt, shape, params, stats=stats)
    if params.algo is ConvAlgo.IM2COL:
        return conv2d_im2col(inp, flt, shape, gemm_config, device, stats=stats)
    plan = winograd_plan(params.tile_rows, params.tile_cols, shape.window_rows, shape.window_cols)
    return conv2d_winograd(inp, flt, shape, plan, gemm_config, device, stats=stats)


def supports(params: ConvAlgoParams, shape: ConvShape) -> bool:
    """Whether ``params`` can run ``shape`` without a capability error."""
    if params.algo is ConvAlgo.TILED:
        return shape.stride in TILED_STRIDES
    if params.algo is ConvAlgo.WINOGRAD:
        if shape.stride != 1:
            return False
        try:
            winograd_plan(params.tile_rows, params.tile_cols, shape.window_rows, shape.window_cols)
        except CapabilityError:
            return False
    return True


__all__ = [
    "conv_flops", "conv2d_naive", "conv2d_tiled", "tile_footprint", "im2col",
    "conv2d_im2col", "Transform1D", "WinogradPlan", "winograd_plan", "conv2d_winograd",
    "conv2d", "supports",
]
