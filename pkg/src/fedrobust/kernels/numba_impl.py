"""Numba-jitted convolution/pooling kernels.

Same contracts as numpy_impl. Compiled lazily on first call; cache=True keeps
compilation cost to the first process on a machine.
"""

import numpy as np
from numba import njit

_JIT = dict(cache=True, fastmath=True, nogil=True)


@njit(**_JIT)
def conv2d_fwd(xp, w, groups):
    B, Cin, Hp, Wp = xp.shape
    Cout, Cg, Kh, Kw = w.shape
    Ho = Hp - Kh + 1
    Wo = Wp - Kw + 1
    cog = Cout // groups
    out = np.zeros((B, Cout, Ho, Wo), dtype=xp.dtype)
    for b in range(B):
        for co in range(Cout):
            g = co // cog
            for ci in range(Cg):
                xin = xp[b, g * Cg + ci]
                ker = w[co, ci]
                for kh in range(Kh):
                    for kw in range(Kw):
                        kv = ker[kh, kw]
                        if kv == 0.0:
                            continue
                        for i in range(Ho):
                            row = xin[i + kh]
                            orow = out[b, co, i]
                            for j in range(Wo):
                                orow[j] += kv * row[j + kw]
    return out


@njit(**_JIT)
def conv2d_bwd_input(dy, w, groups, Hp, Wp):
    B, Cout, Ho, Wo = dy.shape
    _, Cg, Kh, Kw = w.shape
    cog = Cout // groups
    dxp = np.zeros((B, groups * Cg, Hp, Wp), dtype=dy.dtype)
    for b in range(B):
        for co in range(Cout):
            g = co // cog
            for ci in range(Cg):
                ker = w[co, ci]
                dxc = dxp[b, g * Cg + ci]
                for kh in range(Kh):
                    for kw in range(Kw):
                        kv = ker[kh, kw]
                        if kv == 0.0:
                            continue
                        for i in range(Ho):
                            drow = dy[b, co, i]
                            xrow = dxc[i + kh]
                            for j in range(Wo):
                                xrow[j + kw] += kv * drow[j]
    return dxp


@njit(**_JIT)
def conv2d_bwd_weight(xp, dy, groups, Kh, Kw):
    B, Cin, Hp, Wp = xp.shape
    Cout = dy.shape[1]
    Ho = dy.shape[2]
    Wo = dy.shape[3]
    Cg = Cin // groups
    cog = Cout // groups
    dw = np.zeros((Cout, Cg, Kh, Kw), dtype=xp.dtype)
    for b in range(B):
        for co in range(Cout):
            g = co // cog
            for ci in range(Cg):
                xin = xp[b, g * Cg + ci]
                for kh in range(Kh):
                    for kw in range(Kw):
                        acc = 0.0
                        for i in range(Ho):
                            drow = dy[b, co, i]
                            xrow = xin[i + kh]
                            for j in range(Wo):
                                acc += xrow[j + kw] * drow[j]
                        dw[co, ci, kh, kw] += acc
    return dw


@njit(**_JIT)
def avgpool_fwd(x, ph, pw):
    B, C, H, W = x.shape
    Ho = H // ph
    Wo = W // pw
    out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    inv = 1.0 / (ph * pw)
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for di in range(ph):
                        for dj in range(pw):
                            acc += x[b, c, i * ph + di, j * pw + dj]
                    out[b, c, i, j] = acc * inv
    return out


@njit(**_JIT)
def avgpool_bwd(dy, ph, pw, H, W):
    B, C, Ho, Wo = dy.shape
    dx = np.zeros((B, C, H, W), dtype=dy.dtype)
    inv = 1.0 / (ph * pw)
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    g = dy[b, c, i, j] * inv
                    for di in range(ph):
                        for dj in range(pw):
                            dx[b, c, i * ph + di, j * pw + dj] = g
    return dx
