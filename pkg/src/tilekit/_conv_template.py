"""Per-thread driver for one generated tiled-convolution kernel.

Template: ``_conv_kernels.tiled_kernel`` substitutes the constants line.
A logical thread computes a TR x TC spatial tile for FV consecutive
features.  It first copies the input footprint of its tile into a private
patch (each input element is read once), then walks the filter taps,
loading each CV x FV filter block once and applying it across the tile.
"""

import numpy as np
from numba import njit

from tilekit._conv_kernels import ZERO

TR = TC = CV = FV = 1  # @@CONSTANTS@@


@njit(cache=True, nogil=True)
def kernel(inp, flt, out, nb, hh, ww, cc, kk, rr, ss, oh, ow, st, pt, pl,
           patch, task_lo, task_hi):
    nty = (oh + TR - 1) // TR
    ntx = (ow + TC - 1) // TC
    nkg = (kk + FV - 1) // FV
    prow = (TR - 1) * st + rr
    pcol = (TC - 1) * st + ss
    acc = np.zeros((TR, TC, FV), dtype=np.float32)
    fblk = np.zeros((CV, FV), dtype=np.float32)
    mults = 0
    loads = 0
    for task in range(task_lo, task_hi):
        kg = task % nkg
        rest = task // nkg
        tx = rest % ntx
        rest //= ntx
        ty = rest % nty
        n = rest // nty
        oy0 = ty * TR
        ox0 = tx * TC
        k0 = kg * FV
        iy0 = oy0 * st - pt
        ix0 = ox0 * st - pl
        fvalid = min(FV, kk - k0)

        for py in range(prow):
            iy = iy0 + py
            for px in range(pcol):
                ix = ix0 + px
                base = (py * pcol + px) * cc
                if 0 <= iy < hh and 0 <= ix < ww:
                    src = ((n * hh + iy) * ww + ix) * cc
                    for c in range(cc):
                        patch[base + c] = inp[src + c]
                    loads += cc
                else:
                    for c in range(cc):
                        patch[base + c] = ZERO

        acc[:] = ZERO
        for x in range(rr):
            for y in range(ss):
                for c0 in range(0, cc, CV):
                    cvalid = min(CV, cc - c0)
                    for v in range(CV):
                        for f in range(FV):
                            if v < cvalid and f < fvalid:
                                fblk[v, f] = flt[((x * ss + y) * cc + c0 + v) * kk + k0 + f]
                            else:
                                fblk[v, f] = ZERO
                    for a in range(TR):
                        if oy0 + a >= oh:
                            break
                        py = a * st + x
                        iy = iy0 + py
                        if iy < 0 or iy >= hh:
                            continue
                        for b in range(TC):
                            if ox0 + b >= ow:
                                break
                            px = b * st + y
                            ix = ix0 + px
                            if ix < 0 or ix >= ww:
                                continue
                            base = (py * pcol + px) * cc + c0
                            mults += cvalid * fvalid
                            for v in range(CV):
                                if v >= cvalid:
                                    break
                                val = patch[base + v]
                                for f in range(FV):
                                    acc[a, b, f] += val * fblk[v, f]

        for a in range(TR):
            oy = oy0 + a
            if oy >= oh:
                break
            for b in range(TC):
                ox = ox0 + b
                if ox >= ow:
                    break
                obase = ((n * oh + oy) * ow + ox) * kk + k0
                for f in range(fvalid):
                    out[obase + f] = acc[a, b, f]
    return mults, loads
