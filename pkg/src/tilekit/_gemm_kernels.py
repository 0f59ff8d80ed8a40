"""Compiled GEMM kernels.

Operands are flat column-major float32 buffers addressed through strides,
so the transpose flag never appears in an inner loop:

    op_a(A)[i, p] = a[i * sa_i + p * sa_p]
    op_b(B)[p, j] = b[p * sb_p + j * sb_j]

The tiled kernel is generated per (h, w, k_step) so the register tile is a
set of scalar locals the compiler can keep in registers.
"""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np
from numba import njit

from ._jitcache import load_generated

ZERO = np.float32(0.0)


@njit(cache=True, nogil=True)
def gemm_naive_kernel(m, n, k, alpha, beta, a, sa_i, sa_p, b, sb_p, sb_j, c):
    # One output per logical thread, one ordered dot product each.
    for j in range(n):
        for i in range(m):
            r = ZERO
            for p in range(k):
                r += a[i * sa_i + p * sa_p] * b[p * sb_p + j * sb_j]
            if beta == 0:
                c[i + j * m] = alpha * r
            else:
                c[i + j * m] = alpha * r + beta * c[i + j * m]


@njit(cache=True, nogil=True)
def stage_a(a, sa_i, sa_p, m, k, r0, k0, bm, x, stage, off):
    # Copy a bm x x slab of op_a(A) into stage[off:], laid out [p][i].
    # Elements are visited along the operand's contiguous axis; handing
    # element e to logical thread e % (r*c) makes neighbouring threads read
    # neighbouring addresses.
    if sa_i == 1:
        for p in range(x):
            gp = k0 + p
            row = off + p * bm
            for i in range(bm):
                gi = r0 + i
                stage[row + i] = a[gi + gp * sa_p] if gi < m and gp < k else ZERO
    else:
        for i in range(bm):
            gi = r0 + i
            for p in range(x):
                gp = k0 + p
                stage[off + p * bm + i] = a[gi * sa_i + gp] if gi < m and gp < k else ZERO


@njit(cache=True, nogil=True)
def stage_b(b, sb_p, sb_j, n, k, c0, k0, bn, x, stage, off):
    # Copy an x x bn slab of op_b(B) into stage[off:], laid out [p][j].
    if sb_p == 1:
        for j in range(bn):
            gj = c0 + j
            for p in range(x):
                gp = k0 + p
                stage[off + p * bn + j] = b[gp + gj * sb_j] if gj < n and gp < k else ZERO
    else:
        for p in range(x):
            gp = k0 + p
            row = off + p * bn
            for j in range(bn):
                gj = c0 + j
                stage[row + j] = b[gp * sb_p + gj] if gj < n and gp < k else ZERO


def _micro_staged_source(h: int, w: int, ks: int) -> str:
    """Register stage reading from the staging buffer.

    Accumulators round-trip through the work-group's ``acc`` block once per
    slab; within the slab they stay in scalar locals.
    """
    rs = [(i, j) for i in range(h) for j in range(w)]
    out = [
        "def micro_staged(stage, a_off, b_off, bm, bn, tr, tc, kmax, acc):",
        f"    i0 = tr * {h}",
        f"    j0 = tc * {w}",
    ]
    out += [f"    r{i}_{j} = acc[i0 + {i} + (j0 + {j}) * bm]" for i, j in rs]
    out.append(f"    for p0 in range(0, kmax, {ks}):")
    for q in range(ks):
        ind = "        "
        if ks > 1:
            out.append(f"        if p0 + {q} < kmax:")
            ind = "            "
        out.append(f"{ind}pa = a_off + (p0 + {q}) * bm + i0")
        out.append(f"{ind}pb = b_off + (p0 + {q}) * bn + j0")
        out += [f"{ind}a{i} = stage[pa + {i}]" for i in range(h)]
        out += [f"{ind}b{j} = stage[pb + {j}]" for j in range(w)]
        out += [f"{ind}r{i}_{j} += a{i} * b{j}" for i, j in rs]
    out += [f"    acc[i0 + {i} + (j0 + {j}) * bm] = r{i}_{j}" for i, j in rs]
    return "\n".join(out) + "\n"


def _micro_direct_source(h: int, w: int, ks: int, checked: bool) -> str:
    """Register stage reading operands straight from global memory.

    The whole contraction runs in registers and the thread writes its tile
    of C at the end.  ``checked`` adds the bounds tests needed on edge tiles.
    """
    rs = [(i, j) for i in range(h) for j in range(w)]
    name = "micro_direct_checked" if checked else "micro_direct"
    out = [
        f"def {name}(a, sa_i, sa_p, b, sb_p, sb_j, m, n, k, gi0, gj0, alpha, beta, c):",
    ]
    out += [f"    r{i}_{j} = ZERO" for i, j in rs]
    out.append(f"    for p0 in range(0, k, {ks}):")
    for q in range(ks):
        ind = "        "
        if ks > 1:
            out.append(f"        if p0 + {q} < k:")
            ind = "            "
        out.append(f"{ind}p = p0 + {q}")
        for i in range(h):
            load = f"a[(gi0 + {i}) * sa_i + p * sa_p]"
            out.append(f"{ind}a{i} = {load} if gi0 + {i} < m else ZERO" if checked else f"{ind}a{i} = {load}")
        for j in range(w):
            load = f"b[p * sb_p + (gj0 + {j}) * sb_j]"
            out.append(f"{ind}b{j} = {load} if gj0 + {j} < n else ZERO" if checked else f"{ind}b{j} = {load}")
        out += [f"{ind}r{i}_{j} += a{i} * b{j}" for i, j in rs]
    for i, j in rs:
        ind = "    "
        if checked:
            out.append(f"    if gi0 + {i} < m and gj0 + {j} < n:")
            ind = "        "
        out.append(f"{ind}ci = gi0 + {i} + (gj0 + {j}) * m")
        out.append(f"{ind}if beta == 0:")
        out.append(f"{ind}    c[ci] = alpha * r{i}_{j}")
        out.append(f"{ind}else:")
        out.append(f"{ind}    c[ci] = alpha * r{i}_{j} + beta * c[ci]")
    return "\n".join(out) + "\n"


_TEMPLATE = Path(__file__).with_name("_gemm_template.py")
_JIT = "@njit(cache=True, nogil=True)\n"


def kernel_source(h: int, w: int, ks: int) -> str:
    """Source of the generated module for one register-tile shape."""
    micro = "\n\n".join(
        _JIT + src
        for src in (
            _micro_staged_source(h, w, ks),
            _micro_direct_source(h, w, ks, False),
            _micro_direct_source(h, w, ks, True),
        )
    )
    return (
        _TEMPLATE.read_text()
        .replace("H = W = KS = 1  # @@CONSTANTS@@", f"H = {h}\nW = {w}\nKS = {ks}")
        .replace("# @@MICRO@@", micro)
    )


@lru_cache(maxsize=None)
def tiled_kernel(h: int, w: int, ks: int = 1):
    """Kernel specialised for an ``h x w`` register tile and k step ``ks``."""
    module = load_generated(f"gemm_h{h}_w{w}_k{ks}", kernel_source(h, w, ks))
    return module.kernel
