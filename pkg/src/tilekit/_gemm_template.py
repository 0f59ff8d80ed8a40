"""Work-group driver for one generated tiled-GEMM kernel.

This file is a template.  ``_gemm_kernels.tiled_kernel`` copies it into a
generated module, replacing the constants line and the register-stage
marker with code specialised for one (H, W, KS).
"""
# ruff: noqa: F821

from numba import njit

from tilekit._gemm_kernels import ZERO, stage_a, stage_b

H = W = KS = 1  # @@CONSTANTS@@

# @@MICRO@@


@njit(cache=True, nogil=True)
def kernel(m, n, k, alpha, beta, a, sa_i, sa_p, b, sb_p, sb_j, c,
           r, cc, x, nbuf, stage, acc, wg_lo, wg_hi):
    bm = H * r
    bn = W * cc
    nbm = (m + bm - 1) // bm
    nthreads = r * cc
    nslab = (k + x - 1) // x
    half = bm * x + x * bn
    mults = 0
    for wg in range(wg_lo, wg_hi):
        r0 = (wg % nbm) * bm
        c0 = (wg // nbm) * bn

        if nbuf == 0:
            for t in range(nthreads):
                gi0 = r0 + (t % r) * H
                gj0 = c0 + (t // r) * W
                vr = min(H, m - gi0)
                vc = min(W, n - gj0)
                if vr <= 0 or vc <= 0:
                    continue
                mults += vr * vc * k
                if vr == H and vc == W:
                    micro_direct(a, sa_i, sa_p, b, sb_p, sb_j, m, n, k, gi0, gj0, alpha, beta, c)
                else:
                    micro_direct_checked(a, sa_i, sa_p, b, sb_p, sb_j, m, n, k, gi0, gj0,
                                         alpha, beta, c)
            continue

        for e in range(bm * bn):
            acc[e] = ZERO
        if nbuf == 2:
            stage_a(a, sa_i, sa_p, m, k, r0, 0, bm, x, stage, 0)
            stage_b(b, sb_p, sb_j, n, k, c0, 0, bn, x, stage, bm * x)
        for s in range(nslab):
            k0 = s * x
            if nbuf == 2:
                # Fill the other half with slab s+1 before consuming slab s.
                if s + 1 < nslab:
                    nxt = ((s + 1) & 1) * half
                    stage_a(a, sa_i, sa_p, m, k, r0, k0 + x, bm, x, stage, nxt)
                    stage_b(b, sb_p, sb_j, n, k, c0, k0 + x, bn, x, stage, nxt + bm * x)
                off = (s & 1) * half
            else:
                stage_a(a, sa_i, sa_p, m, k, r0, k0, bm, x, stage, 0)
                stage_b(b, sb_p, sb_j, n, k, c0, k0, bn, x, stage, bm * x)
                off = 0
            kmax = min(x, k - k0)
            for t in range(nthreads):
                tr = t % r
                tc = t // r
                vr = min(H, m - r0 - tr * H)
                vc = min(W, n - c0 - tc * W)
                if vr <= 0 or vc <= 0:
                    continue
                mults += vr * vc * kmax
                micro_staged(stage, off, off + bm * x, bm, bn, tr, tc, kmax, acc)

        for j in range(min(bn, n - c0)):
            for i in range(min(bm, m - r0)):
                ci = r0 + i + (c0 + j) * m
                if beta == 0:
                    c[ci] = alpha * acc[i + j * bm]
                else:
                    c[ci] = alpha * acc[i + j * bm] + beta * c[ci]
    return mults
