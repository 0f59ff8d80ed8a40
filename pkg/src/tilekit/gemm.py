"""Matrix multiply: naive oracle, parametrized blocked kernel, reuse and budget models."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _gemm_kernels as _k
from .core import (
    DTYPE,
    ELEM_BYTES,
    DeviceSpec,
    GemmConfig,
    GemmShape,
    Matrix,
    Op,
    host_cpu,
)
from .errors import ConfigError, ContractError, ShapeError

# Valid everywhere: no local memory and a 16-register tile.
DEFAULT_CONFIG = GemmConfig(4, 4, 8, 8, use_local_memory=False)


def _strides(shape: GemmShape) -> tuple[int, int, int, int]:
    m, n, k = shape.m, shape.n, shape.k
    sa_i, sa_p = (1, m) if shape.op_a is Op.IDENTITY else (k, 1)
    sb_p, sb_j = (1, k) if shape.op_b is Op.IDENTITY else (n, 1)
    return sa_i, sa_p, sb_p, sb_j


def gemm_naive(a: Matrix, b: Matrix, c: Matrix, shape: GemmShape) -> Matrix:
    """``alpha * op_a(A) @ op_b(B) + beta * C`` with one ordered dot product per output."""
    shape.check_operands(a, b, c)
    out = np.array(c.data, dtype=DTYPE)
    sa_i, sa_p, sb_p, sb_j = _strides(shape)
    _k.gemm_naive_kernel(
        shape.m, shape.n, shape.k, np.float32(shape.alpha), np.float32(shape.beta),
        a.data, sa_i, sa_p, b.data, sb_p, sb_j, out,
    )
    return Matrix(shape.m, shape.n, out)


# --------------------------------------------------------------------------- reuse model


@dataclass(frozen=True)
class ReuseReport:
    """Flops per element loaded for one m' x n' block over k' steps."""

    reuse: float
    flops: int
    elements_loaded: int


def data_reuse(m: int, n: int, k: int = 1) -> ReuseReport:
    if min(m, n, k) < 1:
        raise ContractError("block dims must be >= 1")
    flops = 2 * m * n * k
    loaded = m * k + k * n
    # Closed form; k cancels, so the value is exactly independent of k.
    return ReuseReport(reuse=2 * m * n / (m + n), flops=flops, elements_loaded=loaded)


def block_traffic(shape: GemmShape, m_blk: int, n_blk: int) -> tuple[int, int]:
    """(flops, elements) to finish one ``m_blk x n_blk`` block of C over the full K."""
    if not (1 <= m_blk <= shape.m and 1 <= n_blk <= shape.n):
        raise ContractError(f"block {m_blk}x{n_blk} does not fit in {shape.m}x{shape.n}")
    big_k = shape.k
    return 2 * big_k * m_blk * n_blk, m_blk * n_blk + m_blk * big_k + n_blk * big_k


# --------------------------------------------------------------------------- budgets


def local_mem_elems(cfg: GemmConfig, dev: DeviceSpec) -> int:
    """Staging buffer size in elements: ``h*r*X + X*w*c``, doubled when double buffering."""
    if not cfg.use_local_memory:
        raise ContractError(f"{cfg.name} does not use local memory")
    x = dev.line_elems
    elems = cfg.h * cfg.r * x + x * cfg.w * cfg.c
    return 2 * elems if cfg.double_buffer else elems


@dataclass(frozen=True)
class Violation:
    budget: str  # "work-group", "registers" or "local memory"
    required: int
    available: int

    def __str__(self) -> str:
        return f"{self.budget}: needs {self.required}, device has {self.available}"


@dataclass(frozen=True)
class Verdict:
    config: GemmConfig
    device: str
    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def budgets(self) -> set[str]:
        return {v.budget for v in self.violations}

    def __str__(self) -> str:
        if self.ok:
            return f"{self.config.name} fits {self.device}"
        return f"{self.config.name} invalid on {self.device}: " + "; ".join(map(str, self.violations))


def validate_config(cfg: GemmConfig, dev: DeviceSpec, shape: GemmShape | None = None) -> Verdict:
    """Check a configuration against every device budget, collecting all violations.

    ``shape`` is accepted for interface symmetry; no budget depends on it.
    """
    del shape
    problems = []
    if cfg.workgroup_size > dev.max_workgroup_size:
        problems.append(Violation("work-group", cfg.workgroup_size, dev.max_workgroup_size))
    regs = cfg.registers + 2 * dev.line_elems
    if regs > dev.register_budget:
        problems.append(Violation("registers", regs, dev.register_budget))
    if cfg.use_local_memory:
        need = ELEM_BYTES * local_mem_elems(cfg, dev)
        if need > dev.local_memory_bytes:
            problems.append(Violation("local memory", need, dev.local_memory_bytes))
    return Verdict(cfg, dev.name, tuple(problems))


# --------------------------------------------------------------------------- tiled kernel


@dataclass
class KernelStats:
    """Counters filled in by instrumented kernels."""

    multiplies: int = 0
    workgroups: int = 0
    launches: int = 0
    loads: int = 0


def _default_workers(n_tasks: int) -> int:
    return max(1, min(os.cpu_count() or 1, n_tasks))


def _launch(shape: GemmShape, cfg: GemmConfig, dev: DeviceSpec,
            a: np.ndarray, b: np.ndarray, out: np.ndarray, workers: int | None) -> tuple[int, int]:
    m, n, k = shape.m, shape.n, shape.k
    sa_i, sa_p, sb_p, sb_j = _strides(shape)
    kern = _k.tiled_kernel(cfg.h, cfg.w, cfg.k_step)
    nbm = -(-m // cfg.block_rows)
    nbn = -(-n // cfg.block_cols)
    n_wg = nbm * nbn
    if cfg.use_local_memory:
        nbuf = 2 if cfg.double_buffer else 1
        stage_elems = local_mem_elems(cfg, dev)
        x = dev.line_elems
    else:
        nbuf, stage_elems, x = 0, 0, dev.line_elems
    alpha, beta = np.float32(shape.alpha), np.float32(shape.beta)

    def run(lo: int, hi: int) -> int:
        # Staging buffer and accumulator block are private to this task.
        stage = np.zeros(stage_elems, DTYPE)
        acc = np.zeros(cfg.block_rows * cfg.block_cols, DTYPE)
        return kern(m, n, k, alpha, beta, a, sa_i, sa_p, b, sb_p, sb_j, out,
                    cfg.r, cfg.c, x, nbuf, stage, acc, lo, hi)

    workers = workers or _default_workers(nbn)
    if workers <= 1 or nbn == 1:
        return run(0, n_wg), n_wg
    # Work-groups are numbered row-block fastest, so slicing on block-column
    # boundaries hands each task a disjoint set of C columns.
    per = -(-nbn // workers)
    bounds = [(lo * nbm, min(nbn, lo + per) * nbm) for lo in range(0, nbn, per)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        mults = sum(pool.map(lambda lh: run(*lh), bounds))
    return mults, n_wg


def _require_valid(cfg: GemmConfig, dev: DeviceSpec, shape: GemmShape) -> None:
    verdict = validate_config(cfg, dev, shape)
    if not verdict:
        raise ConfigError(str(verdict), verdict)


def gemm_tiled(
    a: Matrix,
    b: Matrix,
    c: Matrix,
    shape: GemmShape,
    cfg: GemmConfig,
    dev: DeviceSpec | None = None,
    *,
    workers: int | None = None,
    stats: KernelStats | None = None,
) -> Matrix:
    """Blocked GEMM following the work-group / register-tile hierarchy of ``cfg``.

    C is cut into ``(h*r) x (w*c)`` blocks, one per work-group.  Each of the
    ``r*c`` logical threads owns an ``h x w`` tile of accumulators.  With
    local memory, K is consumed in slabs of one cache line of elements that
    are staged through a buffer of exactly ``local_mem_elems(cfg, dev)``
    elements (two alternating halves when double buffering).  Without it,
    threads read operands directly.

    The result does not depend on ``workers``: every output element belongs
    to one thread and is accumulated in ascending k.
    """
    dev = dev or host_cpu()
    _require_valid(cfg, dev, shape)
    shape.check_operands(a, b, c)
    out = np.array(c.data, dtype=DTYPE)
    mults, n_wg = _launch(shape, cfg, dev, a.data, b.data, out, workers)
    if stats is not None:
        stats.multiplies += mults
        stats.workgroups += n_wg
        stats.launches += 1
    return Matrix(shape.m, shape.n, out)


def gemm_strided_batched(
    a: np.ndarray,
    b: np.ndarray,
    c: np.ndarray,
    shape: GemmShape,
    cfg: GemmConfig,
    dev: DeviceSpec | None = None,
    *,
    stats: KernelStats | None = None,
) -> np.ndarray:
    """Run ``len(a)`` independent GEMMs of one shape over stacked column-major operands.

    Internal entry point for the Winograd pipeline; ``a``, ``b`` and ``c``
    are 2-D arrays whose rows are flat operands.
    """
    dev = dev or host_cpu()
    _require_valid(cfg, dev, shape)
    # Read-only views keep the kernel signature identical to gemm_tiled's.
    a = np.array(a, dtype=DTYPE, order="C")
    b = np.array(b, dtype=DTYPE, order="C")
    a.setflags(write=False)
    b.setflags(write=False)
    out = np.array(c, dtype=DTYPE, order="C")
    count = a.shape[0]
    want = (shape.a_dims[0] * shape.a_dims[1], shape.b_dims[0] * shape.b_dims[1], shape.m * shape.n)
    if (a.shape[1], b.shape[1], out.shape[1]) != want or b.shape[0] != count or out.shape[0] != count:
        raise ShapeError(f"batched operands {a.shape}, {b.shape}, {out.shape} do not match {shape}")
    for i in range(count):
        mults, n_wg = _launch(shape, cfg, dev, a[i], b[i], out[i], workers=1)
        if stats is not None:
            stats.multiplies += mults
            stats.workgroups += n_wg
            stats.launches += 1
    return out
