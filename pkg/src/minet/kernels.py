"""Low-level convolution kernels.

Two tiers live here:

* numba-compiled fast paths for the 3x3 / 3x3x3 stride-1 convolutions that
  dominate training time, written as explicit correlation loops;
* plain numpy reference implementations used by the generic fallback path
  and as independent oracles in the tests.

All kernels operate on contiguous float64 arrays.  The weight-gradient
kernels use fastmath to allow vectorized reductions; within one compiled
build they are exactly deterministic call to call.
"""

import numpy as np
from numba import njit


# ---------------------------------------------------------------------------
# padding helpers


@njit(cache=True)
def pad2d(x, pad):
    """Zero-pad the two trailing axes of a (B, C, H, W) array."""
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for bb in range(b):
        for cc in range(c):
            for y in range(h):
                out[bb, cc, y + pad, pad:pad + w] = x[bb, cc, y]
    return out


@njit(cache=True)
def pad3d(x, pad):
    """Zero-pad the three trailing axes of a (B, C, H, W) volume."""
    b, c, h, w = x.shape
    out = np.zeros((b, c + 2 * pad, h + 2 * pad, w + 2 * pad))
    for bb in range(b):
        for cc in range(c):
            for y in range(h):
                out[bb, cc + pad, y + pad, pad:pad + w] = x[bb, cc, y]
    return out


# ---------------------------------------------------------------------------
# 3x3 stride-1 conv2d fast path


@njit(cache=True)
def conv3x3_fwd(xp, w, bias):
    """Correlate pre-padded xp (B, C, Hp, Wp) with w (O, C, 3, 3).

    Returns (B, O, Hp-2, Wp-2).  Taps are unrolled and each (batch, row)
    accumulates into a small row buffer so the inner loop vectorizes.
    """
    b, c, hp, wp = xp.shape
    o = w.shape[0]
    h = hp - 2
    ww = wp - 2
    out = np.empty((b, o, h, ww))
    buf = np.empty((o, ww))
    for bb in range(b):
        for y in range(h):
            for oo in range(o):
                bv = bias[oo]
                for t in range(ww):
                    buf[oo, t] = bv
            for cc in range(c):
                r0 = xp[bb, cc, y]
                r1 = xp[bb, cc, y + 1]
                r2 = xp[bb, cc, y + 2]
                for oo in range(o):
                    w00 = w[oo, cc, 0, 0]
                    w01 = w[oo, cc, 0, 1]
                    w02 = w[oo, cc, 0, 2]
                    w10 = w[oo, cc, 1, 0]
                    w11 = w[oo, cc, 1, 1]
                    w12 = w[oo, cc, 1, 2]
                    w20 = w[oo, cc, 2, 0]
                    w21 = w[oo, cc, 2, 1]
                    w22 = w[oo, cc, 2, 2]
                    brow = buf[oo]
                    for t in range(ww):
                        brow[t] += (w00 * r0[t] + w01 * r0[t + 1] + w02 * r0[t + 2]
                                    + w10 * r1[t] + w11 * r1[t + 1] + w12 * r1[t + 2]
                                    + w20 * r2[t] + w21 * r2[t + 1] + w22 * r2[t + 2])
            out[bb, :, y, :] = buf
    return out


@njit(cache=True, fastmath=True)
def conv3x3_wgrad(xp, g):
    """Weight gradient for the 3x3 path: correlate padded input with the
    output gradient g (B, O, H, W).  Returns (O, C, 3, 3)."""
    b, c, hp, wp = xp.shape
    o = g.shape[1]
    h = g.shape[2]
    ww = g.shape[3]
    gw = np.zeros((o, c, 3, 3))
    for bb in range(b):
        for cc in range(c):
            for oo in range(o):
                s00 = 0.0; s01 = 0.0; s02 = 0.0
                s10 = 0.0; s11 = 0.0; s12 = 0.0
                s20 = 0.0; s21 = 0.0; s22 = 0.0
                for y in range(h):
                    grow = g[bb, oo, y]
                    r0 = xp[bb, cc, y]
                    r1 = xp[bb, cc, y + 1]
                    r2 = xp[bb, cc, y + 2]
                    for t in range(ww):
                        gv = grow[t]
                        s00 += gv * r0[t]
                        s01 += gv * r0[t + 1]
                        s02 += gv * r0[t + 2]
                        s10 += gv * r1[t]
                        s11 += gv * r1[t + 1]
                        s12 += gv * r1[t + 2]
                        s20 += gv * r2[t]
                        s21 += gv * r2[t + 1]
                        s22 += gv * r2[t + 2]
                gw[oo, cc, 0, 0] += s00
                gw[oo, cc, 0, 1] += s01
                gw[oo, cc, 0, 2] += s02
                gw[oo, cc, 1, 0] += s10
                gw[oo, cc, 1, 1] += s11
                gw[oo, cc, 1, 2] += s12
                gw[oo, cc, 2, 0] += s20
                gw[oo, cc, 2, 1] += s21
                gw[oo, cc, 2, 2] += s22
    return gw


# ---------------------------------------------------------------------------
# fused same-padding (pad=1) 3x3 kernels
# These read the unpadded input directly: border rows substitute a shared
# zero row and the two border columns are handled by scalar epilogues, so
# no padded temporary is ever materialized.  fastmath is restricted to FMA
# contraction on the forward kernel, which keeps evaluation order fixed.


@njit(cache=True, fastmath={"contract"})
def conv3x3_fwd_p1(x, w, bias):
    """Same-size correlation of x (B, C, H, W) with w (O, C, 3, 3), pad 1.

    Requires W >= 2.  Returns (B, O, H, W).

    Output rows y and y+1 are produced together: they share the four input
    rows x[y-1..y+2], so each input row is loaded once per pair instead of
    twice, and sums accumulate straight into the output."""
    b, c, h, wd = x.shape
    o = w.shape[0]
    out = np.empty((b, o, h, wd))
    zrow = np.zeros(wd)
    for bb in range(b):
        y = 0
        while y < h:
            two = y + 1 < h
            for oo in range(o):
                bv = bias[oo]
                b0 = out[bb, oo, y]
                for t in range(wd):
                    b0[t] = bv
                if two:
                    b1 = out[bb, oo, y + 1]
                    for t in range(wd):
                        b1[t] = bv
            for cc in range(c):
                ra = x[bb, cc, y - 1] if y > 0 else zrow
                rb = x[bb, cc, y]
                rc = x[bb, cc, y + 1] if y + 1 < h else zrow
                rd = x[bb, cc, y + 2] if y + 2 < h else zrow
                for oo in range(o):
                    w00 = w[oo, cc, 0, 0]
                    w01 = w[oo, cc, 0, 1]
                    w02 = w[oo, cc, 0, 2]
                    w10 = w[oo, cc, 1, 0]
                    w11 = w[oo, cc, 1, 1]
                    w12 = w[oo, cc, 1, 2]
                    w20 = w[oo, cc, 2, 0]
                    w21 = w[oo, cc, 2, 1]
                    w22 = w[oo, cc, 2, 2]
                    b0 = out[bb, oo, y]
                    b0[0] += (w01 * ra[0] + w02 * ra[1]
                              + w11 * rb[0] + w12 * rb[1]
                              + w21 * rc[0] + w22 * rc[1])
                    b0[wd - 1] += (w00 * ra[wd - 2] + w01 * ra[wd - 1]
                                   + w10 * rb[wd - 2] + w11 * rb[wd - 1]
                                   + w20 * rc[wd - 2] + w21 * rc[wd - 1])
                    if two:
                        b1 = out[bb, oo, y + 1]
                        b1[0] += (w01 * rb[0] + w02 * rb[1]
                                  + w11 * rc[0] + w12 * rc[1]
                                  + w21 * rd[0] + w22 * rd[1])
                        b1[wd - 1] += (w00 * rb[wd - 2] + w01 * rb[wd - 1]
                                       + w10 * rc[wd - 2] + w11 * rc[wd - 1]
                                       + w20 * rd[wd - 2] + w21 * rd[wd - 1])
                        for t in range(1, wd - 1):
                            va = ra[t - 1] * w00 + ra[t] * w01 + ra[t + 1] * w02
                            vb1 = rb[t - 1] * w10 + rb[t] * w11 + rb[t + 1] * w12
                            vb2 = rb[t - 1] * w00 + rb[t] * w01 + rb[t + 1] * w02
                            vc1 = rc[t - 1] * w20 + rc[t] * w21 + rc[t + 1] * w22
                            vc2 = rc[t - 1] * w10 + rc[t] * w11 + rc[t + 1] * w12
                            vd = rd[t - 1] * w20 + rd[t] * w21 + rd[t + 1] * w22
                            b0[t] += va + vb1 + vc1
                            b1[t] += vb2 + vc2 + vd
                    else:
                        for t in range(1, wd - 1):
                            b0[t] += (ra[t - 1] * w00 + ra[t] * w01 + ra[t + 1] * w02
                                      + rb[t - 1] * w10 + rb[t] * w11 + rb[t + 1] * w12
                                      + rc[t - 1] * w20 + rc[t] * w21 + rc[t + 1] * w22)
            y += 2
    return out


@njit(cache=True, fastmath=True)
def conv3x3_wgrad_p1(x, g):
    """Weight and bias gradients of the pad-1 path from unpadded
    x (B, C, H, W) and the output gradient g (B, O, H, W).  Requires
    W >= 2; returns ((O, C, 3, 3), (O,)).

    One pass over the arrays: for each pair of gradient rows the loop
    visits every (channel, output) combination while the shared input and
    gradient rows are cache-resident, instead of re-streaming each input
    plane once per output channel.  The bias gradient rides along since g
    is already in hand."""
    b, c, h, wd = x.shape
    o = g.shape[1]
    gw = np.zeros((o, c, 3, 3))
    gb = np.zeros(o)
    zrow = np.zeros(wd)
    for bb in range(b):
        y = 0
        while y < h:
            two = y + 1 < h
            for oo in range(o):
                g0 = g[bb, oo, y]
                acc = 0.0
                for t in range(wd):
                    acc += g0[t]
                if two:
                    g1 = g[bb, oo, y + 1]
                    for t in range(wd):
                        acc += g1[t]
                gb[oo] += acc
            for cc in range(c):
                ra = x[bb, cc, y - 1] if y > 0 else zrow
                rb = x[bb, cc, y]
                rc = x[bb, cc, y + 1] if y + 1 < h else zrow
                rd = x[bb, cc, y + 2] if y + 2 < h else zrow
                for oo in range(o):
                    g0 = g[bb, oo, y]
                    s00 = 0.0; s01 = 0.0; s02 = 0.0
                    s10 = 0.0; s11 = 0.0; s12 = 0.0
                    s20 = 0.0; s21 = 0.0; s22 = 0.0
                    if two:
                        g1 = g[bb, oo, y + 1]
                        gv0 = g0[0]; gv1 = g1[0]
                        s01 += gv0 * ra[0] + gv1 * rb[0]
                        s02 += gv0 * ra[1] + gv1 * rb[1]
                        s11 += gv0 * rb[0] + gv1 * rc[0]
                        s12 += gv0 * rb[1] + gv1 * rc[1]
                        s21 += gv0 * rc[0] + gv1 * rd[0]
                        s22 += gv0 * rc[1] + gv1 * rd[1]
                        for t in range(1, wd - 1):
                            gv0 = g0[t]; gv1 = g1[t]
                            s00 += gv0 * ra[t - 1] + gv1 * rb[t - 1]
                            s01 += gv0 * ra[t] + gv1 * rb[t]
                            s02 += gv0 * ra[t + 1] + gv1 * rb[t + 1]
                            s10 += gv0 * rb[t - 1] + gv1 * rc[t - 1]
                            s11 += gv0 * rb[t] + gv1 * rc[t]
                            s12 += gv0 * rb[t + 1] + gv1 * rc[t + 1]
                            s20 += gv0 * rc[t - 1] + gv1 * rd[t - 1]
                            s21 += gv0 * rc[t] + gv1 * rd[t]
                            s22 += gv0 * rc[t + 1] + gv1 * rd[t + 1]
                        gv0 = g0[wd - 1]; gv1 = g1[wd - 1]
                        s00 += gv0 * ra[wd - 2] + gv1 * rb[wd - 2]
                        s01 += gv0 * ra[wd - 1] + gv1 * rb[wd - 1]
                        s10 += gv0 * rb[wd - 2] + gv1 * rc[wd - 2]
                        s11 += gv0 * rb[wd - 1] + gv1 * rc[wd - 1]
                        s20 += gv0 * rc[wd - 2] + gv1 * rd[wd - 2]
                        s21 += gv0 * rc[wd - 1] + gv1 * rd[wd - 1]
                    else:
                        gv = g0[0]
                        s01 += gv * ra[0]; s02 += gv * ra[1]
                        s11 += gv * rb[0]; s12 += gv * rb[1]
                        s21 += gv * rc[0]; s22 += gv * rc[1]
                        for t in range(1, wd - 1):
                            gv = g0[t]
                            s00 += gv * ra[t - 1]; s01 += gv * ra[t]; s02 += gv * ra[t + 1]
                            s10 += gv * rb[t - 1]; s11 += gv * rb[t]; s12 += gv * rb[t + 1]
                            s20 += gv * rc[t - 1]; s21 += gv * rc[t]; s22 += gv * rc[t + 1]
                        gv = g0[wd - 1]
                        s00 += gv * ra[wd - 2]; s01 += gv * ra[wd - 1]
                        s10 += gv * rb[wd - 2]; s11 += gv * rb[wd - 1]
                        s20 += gv * rc[wd - 2]; s21 += gv * rc[wd - 1]
                    gw[oo, cc, 0, 0] += s00
                    gw[oo, cc, 0, 1] += s01
                    gw[oo, cc, 0, 2] += s02
                    gw[oo, cc, 1, 0] += s10
                    gw[oo, cc, 1, 1] += s11
                    gw[oo, cc, 1, 2] += s12
                    gw[oo, cc, 2, 0] += s20
                    gw[oo, cc, 2, 1] += s21
                    gw[oo, cc, 2, 2] += s22
            y += 2
    return gw, gb


# ---------------------------------------------------------------------------
# 3x3x3 stride-1 depth-preserving conv3d fast path
# Input volumes carry a single channel, so the kernel slides jointly over
# (depth, height, width) of a (B, C, H, W) block (the channel axis of the
# 2d feature map acts as depth).


@njit(cache=True)
def conv3x3x3_fwd(xp, w, bias):
    """Correlate pre-padded xp (B, Cp, Hp, Wp) with w (3, 3, 3) + bias scalar.

    Returns (B, Cp-2, Hp-2, Wp-2)."""
    b, cp, hp, wp = xp.shape
    c = cp - 2
    h = hp - 2
    ww = wp - 2
    out = np.empty((b, c, h, ww))
    w000 = w[0, 0, 0]; w001 = w[0, 0, 1]; w002 = w[0, 0, 2]
    w010 = w[0, 1, 0]; w011 = w[0, 1, 1]; w012 = w[0, 1, 2]
    w020 = w[0, 2, 0]; w021 = w[0, 2, 1]; w022 = w[0, 2, 2]
    w100 = w[1, 0, 0]; w101 = w[1, 0, 1]; w102 = w[1, 0, 2]
    w110 = w[1, 1, 0]; w111 = w[1, 1, 1]; w112 = w[1, 1, 2]
    w120 = w[1, 2, 0]; w121 = w[1, 2, 1]; w122 = w[1, 2, 2]
    w200 = w[2, 0, 0]; w201 = w[2, 0, 1]; w202 = w[2, 0, 2]
    w210 = w[2, 1, 0]; w211 = w[2, 1, 1]; w212 = w[2, 1, 2]
    w220 = w[2, 2, 0]; w221 = w[2, 2, 1]; w222 = w[2, 2, 2]
    for bb in range(b):
        for cc in range(c):
            for y in range(h):
                r00 = xp[bb, cc, y]
                r01 = xp[bb, cc, y + 1]
                r02 = xp[bb, cc, y + 2]
                r10 = xp[bb, cc + 1, y]
                r11 = xp[bb, cc + 1, y + 1]
                r12 = xp[bb, cc + 1, y + 2]
                r20 = xp[bb, cc + 2, y]
                r21 = xp[bb, cc + 2, y + 1]
                r22 = xp[bb, cc + 2, y + 2]
                orow = out[bb, cc, y]
                for t in range(ww):
                    orow[t] = (bias
                               + w000 * r00[t] + w001 * r00[t + 1] + w002 * r00[t + 2]
                               + w010 * r01[t] + w011 * r01[t + 1] + w012 * r01[t + 2]
                               + w020 * r02[t] + w021 * r02[t + 1] + w022 * r02[t + 2]
                               + w100 * r10[t] + w101 * r10[t + 1] + w102 * r10[t + 2]
                               + w110 * r11[t] + w111 * r11[t + 1] + w112 * r11[t + 2]
                               + w120 * r12[t] + w121 * r12[t + 1] + w122 * r12[t + 2]
                               + w200 * r20[t] + w201 * r20[t + 1] + w202 * r20[t + 2]
                               + w210 * r21[t] + w211 * r21[t + 1] + w212 * r21[t + 2]
                               + w220 * r22[t] + w221 * r22[t + 1] + w222 * r22[t + 2])
    return out


@njit(cache=True, fastmath=True)
def conv3x3x3_wgrad(xp, g):
    """Weight gradient for the 3x3x3 path.  Returns (3, 3, 3)."""
    b = g.shape[0]
    c = g.shape[1]
    h = g.shape[2]
    ww = g.shape[3]
    gw = np.zeros((3, 3, 3))
    for a in range(3):
        for i in range(3):
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            for bb in range(b):
                for cc in range(c):
                    for y in range(h):
                        grow = g[bb, cc, y]
                        row = xp[bb, cc + a, y + i]
                        for t in range(ww):
                            gv = grow[t]
                            s0 += gv * row[t]
                            s1 += gv * row[t + 1]
                            s2 += gv * row[t + 2]
            gw[a, i, 0] = s0
            gw[a, i, 1] = s1
            gw[a, i, 2] = s2
    return gw


# ---------------------------------------------------------------------------
# fused same-padding (pad=1) 3x3x3 kernels, mirroring the 2d pair above


@njit(cache=True, fastmath={"contract"})
def conv3x3x3_fwd_p1(x, w, bias):
    """Same-size volume correlation of x (B, D, H, W) with w (3, 3, 3) and a
    scalar bias, zero-padded by 1 on depth, height and width.  Requires
    W >= 2; returns (B, D, H, W)."""
    b, d, h, wd = x.shape
    out = np.empty((b, d, h, wd))
    zrow = np.zeros(wd)
    w000 = w[0, 0, 0]; w001 = w[0, 0, 1]; w002 = w[0, 0, 2]
    w010 = w[0, 1, 0]; w011 = w[0, 1, 1]; w012 = w[0, 1, 2]
    w020 = w[0, 2, 0]; w021 = w[0, 2, 1]; w022 = w[0, 2, 2]
    w100 = w[1, 0, 0]; w101 = w[1, 0, 1]; w102 = w[1, 0, 2]
    w110 = w[1, 1, 0]; w111 = w[1, 1, 1]; w112 = w[1, 1, 2]
    w120 = w[1, 2, 0]; w121 = w[1, 2, 1]; w122 = w[1, 2, 2]
    w200 = w[2, 0, 0]; w201 = w[2, 0, 1]; w202 = w[2, 0, 2]
    w210 = w[2, 1, 0]; w211 = w[2, 1, 1]; w212 = w[2, 1, 2]
    w220 = w[2, 2, 0]; w221 = w[2, 2, 1]; w222 = w[2, 2, 2]
    for bb in range(b):
        for cc in range(d):
            below = cc > 0
            above = cc + 1 < d
            for y in range(h):
                top = y > 0
                bot = y + 1 < h
                r00 = x[bb, cc - 1, y - 1] if below and top else zrow
                r01 = x[bb, cc - 1, y] if below else zrow
                r02 = x[bb, cc - 1, y + 1] if below and bot else zrow
                r10 = x[bb, cc, y - 1] if top else zrow
                r11 = x[bb, cc, y]
                r12 = x[bb, cc, y + 1] if bot else zrow
                r20 = x[bb, cc + 1, y - 1] if above and top else zrow
                r21 = x[bb, cc + 1, y] if above else zrow
                r22 = x[bb, cc + 1, y + 1] if above and bot else zrow
                orow = out[bb, cc, y]
                orow[0] = (bias
                           + w001 * r00[0] + w002 * r00[1]
                           + w011 * r01[0] + w012 * r01[1]
                           + w021 * r02[0] + w022 * r02[1]
                           + w101 * r10[0] + w102 * r10[1]
                           + w111 * r11[0] + w112 * r11[1]
                           + w121 * r12[0] + w122 * r12[1]
                           + w201 * r20[0] + w202 * r20[1]
                           + w211 * r21[0] + w212 * r21[1]
                           + w221 * r22[0] + w222 * r22[1])
                for t in range(1, wd - 1):
                    orow[t] = (bias
                               + w000 * r00[t - 1] + w001 * r00[t] + w002 * r00[t + 1]
                               + w010 * r01[t - 1] + w011 * r01[t] + w012 * r01[t + 1]
                               + w020 * r02[t - 1] + w021 * r02[t] + w022 * r02[t + 1]
                               + w100 * r10[t - 1] + w101 * r10[t] + w102 * r10[t + 1]
                               + w110 * r11[t - 1] + w111 * r11[t] + w112 * r11[t + 1]
                               + w120 * r12[t - 1] + w121 * r12[t] + w122 * r12[t + 1]
                               + w200 * r20[t - 1] + w201 * r20[t] + w202 * r20[t + 1]
                               + w210 * r21[t - 1] + w211 * r21[t] + w212 * r21[t + 1]
                               + w220 * r22[t - 1] + w221 * r22[t] + w222 * r22[t + 1])
                orow[wd - 1] = (bias
                                + w000 * r00[wd - 2] + w001 * r00[wd - 1]
                                + w010 * r01[wd - 2] + w011 * r01[wd - 1]
                                + w020 * r02[wd - 2] + w021 * r02[wd - 1]
                                + w100 * r10[wd - 2] + w101 * r10[wd - 1]
                                + w110 * r11[wd - 2] + w111 * r11[wd - 1]
                                + w120 * r12[wd - 2] + w121 * r12[wd - 1]
                                + w200 * r20[wd - 2] + w201 * r20[wd - 1]
                                + w210 * r21[wd - 2] + w211 * r21[wd - 1]
                                + w220 * r22[wd - 2] + w221 * r22[wd - 1])
    return out


@njit(cache=True, fastmath=True)
def conv3x3x3_wgrad_p1(x, g):
    """Weight gradient of the fused 3x3x3 path from unpadded x and g, both
    (B, D, H, W) with W >= 2.  Returns (3, 3, 3)."""
    b, d, h, wd = x.shape
    gw = np.empty((3, 3, 3))
    for a in range(3):
        for i in range(3):
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            for bb in range(b):
                for cc in range(d):
                    pc = cc + a - 1
                    if pc < 0 or pc >= d:
                        continue
                    for y in range(h):
                        py = y + i - 1
                        if py < 0 or py >= h:
                            continue
                        gr = g[bb, cc, y]
                        row = x[bb, pc, py]
                        gv = gr[0]
                        s1 += gv * row[0]
                        s2 += gv * row[1]
                        for t in range(1, wd - 1):
                            gv = gr[t]
                            s0 += gv * row[t - 1]
                            s1 += gv * row[t]
                            s2 += gv * row[t + 1]
                        gv = gr[wd - 1]
                        s0 += gv * row[wd - 2]
                        s1 += gv * row[wd - 1]
            gw[a, i, 0] = s0
            gw[a, i, 1] = s1
            gw[a, i, 2] = s2
    return gw


# ---------------------------------------------------------------------------
# numpy reference implementations (generic strides/kernel sizes)


def _strided_patches(xp, kh, kw, stride):
    """View of all (kh, kw) patches: (B, C, H', W', kh, kw)."""
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sb, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (b, c, ho, wo, kh, kw),
        (sb, sc, sh * stride, sw * stride, sh, sw), writeable=False)


def conv2d_ref_forward(x, w, bias, stride=1, padding=0):
    """Plain correlation forward, any kernel size / stride / padding."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    v = _strided_patches(x, w.shape[2], w.shape[3], stride)
    out = np.tensordot(v, w, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += bias[None, :, None, None]
    return out

def conv2d_ref_input_grad(g, x_shape, w, stride=1, padding=0):
    """Input gradient by explicit scatter over kernel taps."""
    b, c, h, w_in = x_shape
    kh, kw = w.shape[2], w.shape[3]
    gxp = np.zeros((b, c, h + 2 * padding, w_in + 2 * padding))
    ho, wo = g.shape[2], g.shape[3]
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0]))
            gxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += (
                contrib.transpose(0, 3, 1, 2))
    if padding:
        gxp = gxp[:, :, padding:padding + h, padding:padding + w_in]
    return gxp


def conv2d_ref_weight_grad(g, x, w_shape, stride=1, padding=0):
    """Weight gradient: correlate input patches with the output gradient."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    v = _strided_patches(x, w_shape[2], w_shape[3], stride)
    return np.tensordot(g, v, axes=([0, 2, 3], [0, 2, 3]))


def conv3d_ref_forward(x, w, bias, padding):
    """Depth-preserving volume correlation.

    x: (B, C, H, W) treated as single-channel volumes, w: (kc, kh, kw),
    padding: (pc, ph, pw)."""
    pc, ph, pw = padding
    xp = np.pad(x, ((0, 0), (pc, pc), (ph, ph), (pw, pw)))
    kc, kh, kw = w.shape
    b = x.shape[0]
    co = xp.shape[1] - kc + 1
    ho = xp.shape[2] - kh + 1
    wo = xp.shape[3] - kw + 1
    sb, sc, sh, sw = xp.strides
    v = np.lib.stride_tricks.as_strided(
        xp, (b, co, ho, wo, kc, kh, kw), (sb, sc, sh, sw, sc, sh, sw),
        writeable=False)
    return np.tensordot(v, w, axes=([4, 5, 6], [0, 1, 2])) + bias


def conv3d_ref_input_grad(g, x_shape, w, padding):
    """Input gradient of the volume correlation via tap scatter."""
    pc, ph, pw = padding
    b, c, h, w_in = x_shape
    gxp = np.zeros((b, c + 2 * pc, h + 2 * ph, w_in + 2 * pw))
    kc, kh, kw = w.shape
    co, ho, wo = g.shape[1], g.shape[2], g.shape[3]
    for a in range(kc):
        for i in range(kh):
            for j in range(kw):
                gxp[:, a:a + co, i:i + ho, j:j + wo] += g * w[a, i, j]
    return gxp[:, pc:pc + c, ph:ph + h, pw:pw + w_in]


def conv3d_ref_weight_grad(g, x, w_shape, padding):
    """Weight gradient of the volume correlation."""
    pc, ph, pw = padding
    xp = np.pad(x, ((0, 0), (pc, pc), (ph, ph), (pw, pw)))
    kc, kh, kw = w_shape
    gw = np.empty((kc, kh, kw))
    co, ho, wo = g.shape[1], g.shape[2], g.shape[3]
    for a in range(kc):
        for i in range(kh):
            for j in range(kw):
                gw[a, i, j] = np.sum(g * xp[:, a:a + co, i:i + ho, j:j + wo])
    return gw
