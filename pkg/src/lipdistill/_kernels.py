"""JIT-compiled inner loops for the GRU scan.

The recurrence is the one hot loop the array library cannot batch away, so
its per-step elementwise work is fused here. Math matches _gru_step exactly:

    z = sigmoid(xz + h Uz), r = sigmoid(xr + h Ur)
    c = tanh(xh + (r h) Uh), h' = (1 - z) h + z c

No fastmath, no parallelism: results are deterministic and stay under the
finite-difference harness via the BiGRU checks.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def gru_scan_fwd(xz, xr, xh, uz, ur, uh, reverse):
    """Run the recurrence over precomputed gate inputs (biases folded in).

    xz, xr, xh: [B x T x H] contiguous. Returns (out, zs, rs, cs, prev),
    all [B x T x H]; prev holds the hidden state entering each step.
    """
    b, t_len, hdim = xz.shape
    out = np.empty((b, t_len, hdim))
    zs = np.empty((b, t_len, hdim))
    rs = np.empty((b, t_len, hdim))
    cs = np.empty((b, t_len, hdim))
    prev = np.empty((b, t_len, hdim))
    h = np.zeros((b, hdim))
    rh = np.empty((b, hdim))
    for i in range(t_len):
        t = t_len - 1 - i if reverse else i
        az = np.dot(h, uz)
        ar = np.dot(h, ur)
        for bi in range(b):
            for j in range(hdim):
                prev[bi, t, j] = h[bi, j]
                vz = xz[bi, t, j] + az[bi, j]
                if vz >= 0.0:
                    z = 1.0 / (1.0 + math.exp(-vz))
                else:
                    ez = math.exp(vz)
                    z = ez / (1.0 + ez)
                vr = xr[bi, t, j] + ar[bi, j]
                if vr >= 0.0:
                    r = 1.0 / (1.0 + math.exp(-vr))
                else:
                    er = math.exp(vr)
                    r = er / (1.0 + er)
                zs[bi, t, j] = z
                rs[bi, t, j] = r
                rh[bi, j] = r * h[bi, j]
        ac = np.dot(rh, uh)
        for bi in range(b):
            for j in range(hdim):
                c = math.tanh(xh[bi, t, j] + ac[bi, j])
                cs[bi, t, j] = c
                hn = (1.0 - zs[bi, t, j]) * h[bi, j] + zs[bi, t, j] * c
                h[bi, j] = hn
                out[bi, t, j] = hn
    return out, zs, rs, cs, prev


@njit(cache=True)
def gru_scan_bwd(g, zs, rs, cs, prev, uzt, urt, uht, reverse):
    """Backpropagate through the recurrence.

    g: upstream gradient [B x T x H] (any strides). uzt/urt/uht are the
    transposed recurrent weights, contiguous. Returns per-gate pre-activation
    gradients dxz, dxr, dxh [B x T x H]; weight gradients follow from them
    with one matmul each on the caller's side.
    """
    b, t_len, hdim = zs.shape
    dxz = np.empty((b, t_len, hdim))
    dxr = np.empty((b, t_len, hdim))
    dxh = np.empty((b, t_len, hdim))
    dh = np.zeros((b, hdim))
    gt = np.empty((b, hdim))
    da_c = np.empty((b, hdim))
    da_r = np.empty((b, hdim))
    da_z = np.empty((b, hdim))
    for i in range(t_len):
        t = i if reverse else t_len - 1 - i
        for bi in range(b):
            for j in range(hdim):
                gv = g[bi, t, j] + dh[bi, j]
                gt[bi, j] = gv
                c = cs[bi, t, j]
                da_c[bi, j] = gv * zs[bi, t, j] * (1.0 - c * c)
        d_rh = np.dot(da_c, uht)
        for bi in range(b):
            for j in range(hdim):
                z = zs[bi, t, j]
                r = rs[bi, t, j]
                hp = prev[bi, t, j]
                dar = d_rh[bi, j] * hp * r * (1.0 - r)
                daz = gt[bi, j] * (cs[bi, t, j] - hp) * z * (1.0 - z)
                da_r[bi, j] = dar
                da_z[bi, j] = daz
                dxz[bi, t, j] = daz
                dxr[bi, t, j] = dar
                dxh[bi, t, j] = da_c[bi, j]
                dh[bi, j] = gt[bi, j] * (1.0 - z) + d_rh[bi, j] * r
        dh += np.dot(da_r, urt) + np.dot(da_z, uzt)
    return dxz, dxr, dxh
