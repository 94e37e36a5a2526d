"""Pure-numpy reference kernels (im2col + BLAS matmul).

All convolutions are stride-1 cross-correlations over pre-padded inputs.
Shapes follow the (batch, channel, height, width) convention.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_fwd(xp, w, groups):
    """xp: (B, Cin, Hp, Wp) padded input; w: (Cout, Cin//g, Kh, Kw)."""
    B, Cin, Hp, Wp = xp.shape
    Cout, Cg, Kh, Kw = w.shape
    Ho, Wo = Hp - Kh + 1, Wp - Kw + 1
    cog = Cout // groups
    out = np.empty((B, Cout, Ho, Wo), dtype=xp.dtype)
    # windows: (B, Cin, Ho, Wo, Kh, Kw)
    win = sliding_window_view(xp, (Kh, Kw), axis=(2, 3))
    for g in range(groups):
        xg = win[:, g * Cg:(g + 1) * Cg]          # (B, Cg, Ho, Wo, Kh, Kw)
        wg = w[g * cog:(g + 1) * cog]             # (cog, Cg, Kh, Kw)
        col = xg.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Cg * Kh * Kw)
        res = col @ wg.reshape(cog, -1).T         # (B*Ho*Wo, cog)
        out[:, g * cog:(g + 1) * cog] = res.reshape(B, Ho, Wo, cog).transpose(0, 3, 1, 2)
    return out


def conv2d_bwd_input(dy, w, groups, Hp, Wp):
    """Gradient w.r.t. the padded input. dy: (B, Cout, Ho, Wo)."""
    B, Cout, Ho, Wo = dy.shape
    _, Cg, Kh, Kw = w.shape
    cog = Cout // groups
    # full correlation with the flipped kernel == conv2d of padded dy with w^T
    dyp = np.zeros((B, Cout, Ho + 2 * (Kh - 1), Wo + 2 * (Kw - 1)), dtype=dy.dtype)
    dyp[:, :, Kh - 1:Kh - 1 + Ho, Kw - 1:Kw - 1 + Wo] = dy
    wf = w[:, :, ::-1, ::-1]
    dxp = np.empty((B, groups * Cg, Hp, Wp), dtype=dy.dtype)
    win = sliding_window_view(dyp, (Kh, Kw), axis=(2, 3))
    for g in range(groups):
        dg = win[:, g * cog:(g + 1) * cog]        # (B, cog, Hp, Wp, Kh, Kw)
        wg = wf[g * cog:(g + 1) * cog]            # (cog, Cg, Kh, Kw)
        col = dg.transpose(0, 2, 3, 1, 4, 5).reshape(B * Hp * Wp, cog * Kh * Kw)
        wt = wg.transpose(1, 0, 2, 3).reshape(Cg, -1)
        res = col @ wt.T                          # (B*Hp*Wp, Cg)
        dxp[:, g * Cg:(g + 1) * Cg] = res.reshape(B, Hp, Wp, Cg).transpose(0, 3, 1, 2)
    return dxp


def conv2d_bwd_weight(xp, dy, groups, Kh, Kw):
    """Gradient w.r.t. the kernel. xp padded input, dy output gradient."""
    B, Cin, Hp, Wp = xp.shape
    _, Cout, Ho, Wo = dy.shape[0], dy.shape[1], dy.shape[2], dy.shape[3]
    Cg = Cin // groups
    cog = dy.shape[1] // groups
    dw = np.empty((dy.shape[1], Cg, Kh, Kw), dtype=xp.dtype)
    win = sliding_window_view(xp, (Ho, Wo), axis=(2, 3))  # (B, Cin, Kh, Kw, Ho, Wo)
    for g in range(groups):
        xg = win[:, g * Cg:(g + 1) * Cg]          # (B, Cg, Kh, Kw, Ho, Wo)
        dg = dy[:, g * cog:(g + 1) * cog]         # (B, cog, Ho, Wo)
        col = xg.reshape(B, Cg * Kh * Kw, Ho * Wo)
        dgf = dg.reshape(B, cog, Ho * Wo)
        acc = np.einsum("bkp,bcp->ck", col, dgf)
        dw[g * cog:(g + 1) * cog] = acc.reshape(cog, Cg, Kh, Kw)
    return dw


def avgpool_fwd(x, ph, pw):
    B, C, H, W = x.shape
    Ho, Wo = H // ph, W // pw
    return x[:, :, :Ho * ph, :Wo * pw].reshape(B, C, Ho, ph, Wo, pw).mean(axis=(3, 5))


def avgpool_bwd(dy, ph, pw, H, W):
    B, C, Ho, Wo = dy.shape
    dx = np.zeros((B, C, H, W), dtype=dy.dtype)
    up = np.repeat(np.repeat(dy, ph, axis=2), pw, axis=3) / (ph * pw)
    dx[:, :, :Ho * ph, :Wo * pw] = up
    return dx
