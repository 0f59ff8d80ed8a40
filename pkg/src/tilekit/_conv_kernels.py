"""Compiled convolution kernels over flat NHWC inputs and HWCK filters."""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np
from numba import njit

from ._jitcache import load_generated

ZERO = np.float32(0.0)


@njit(cache=True, nogil=True)
def conv_naive_kernel(inp, flt, out, nb, hh, ww, cc, kk, rr, ss, oh, ow, st, pt, pl):
    mults = 0
    for n in range(nb):
        for h in range(oh):
            for w in range(ow):
                for k in range(kk):
                    acc = ZERO
                    for x in range(rr):
                        iy = h * st + x - pt
                        if iy < 0 or iy >= hh:
                            continue
                        for y in range(ss):
                            ix = w * st + y - pl
                            if ix < 0 or ix >= ww:
                                continue
                            ibase = ((n * hh + iy) * ww + ix) * cc
                            fbase = (x * ss + y) * cc * kk + k
                            for c in range(cc):
                                acc += inp[ibase + c] * flt[fbase + c * kk]
                            mults += cc
                    out[((n * oh + h) * ow + w) * kk + k] = acc
    return mults


@njit(cache=True, nogil=True)
def im2col_kernel(inp, patches, nb, hh, ww, cc, rr, ss, oh, ow, st, pt, pl):
    # patches is column-major (P x R*S*C): row p = (n, h, w), column q = (x, y, c).
    prows = nb * oh * ow
    for x in range(rr):
        for y in range(ss):
            for c in range(cc):
                q = (x * ss + y) * cc + c
                col = q * prows
                p = 0
                for n in range(nb):
                    for h in range(oh):
                        iy = h * st + x - pt
                        for w in range(ow):
                            ix = w * st + y - pl
                            if 0 <= iy < hh and 0 <= ix < ww:
                                patches[col + p] = inp[((n * hh + iy) * ww + ix) * cc + c]
                            else:
                                patches[col + p] = ZERO
                            p += 1


_TEMPLATE = Path(__file__).with_name("_conv_template.py")


def tiled_source(tr: int, tc: int, cv: int, fv: int) -> str:
    return _TEMPLATE.read_text().replace(
        "TR = TC = CV = FV = 1  # @@CONSTANTS@@",
        f"TR = {tr}\nTC = {tc}\nCV = {cv}\nFV = {fv}",
    )


@lru_cache(maxsize=None)
def tiled_kernel(tr: int, tc: int, cv: int, fv: int):
    module = load_generated(f"conv_t{tr}x{tc}_v{cv}x{fv}", tiled_source(tr, tc, cv, fv))
    return module.kernel
