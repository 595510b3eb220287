"""Numba implementations of the composite-convolution kernels.

Every output element is accumulated serially by exactly one loop thread,
so results are byte-identical for any thread count; ``prange`` only
distributes independent elements.  ``fastmath`` stays off to keep the
summation order fixed.

The wrappers in :mod:`dcnet.kernels` pass weights pre-transposed so the
innermost loops run over contiguous memory:

* forward:          wt[t, k, l]   (accumulate over k, t into acc[l])
* input gradient:   wt[t, l, k]   (accumulate over l, t into acc[k])
* weight gradient:  per-order local buffers laid out (t, k)
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def conv_forward(xp, gather, wt_flat, band_woff, band_coff, band_q, bias, out):
    b_total = xp.shape[0]
    v_total, t_total = gather.shape
    nb = band_q.size
    qmax = np.max(band_q)
    for b in prange(b_total):
        acc = np.empty(qmax)
        for v in range(v_total):
            for bi in range(nb):
                q = band_q[bi]
                c0 = band_coff[bi]
                w0 = band_woff[bi]
                for l in range(q):
                    acc[l] = bias[c0 + l]
                for t in range(t_total):
                    src = gather[v, t]
                    wt0 = w0 + t * q * q
                    for k in range(q):
                        xv = xp[b, src, c0 + k]
                        wk = wt0 + k * q
                        for l in range(q):
                            acc[l] += xv * wt_flat[wk + l]
                for l in range(q):
                    out[b, v, c0 + l] = acc[l]


@njit(parallel=True, cache=True)
def conv_backward_weights(gout, xp, gather, band_woff, band_coff, band_q, gw):
    # gw laid out like the canonical weights: [band][l][k][t]
    b_total = gout.shape[0]
    v_total, t_total = gather.shape
    nb = band_q.size
    total_l = 0
    for bi in range(nb):
        total_l += band_q[bi]
    for cl in prange(total_l):
        # locate the band and order of this output channel
        bi = 0
        skipped = 0
        while cl - skipped >= band_q[bi]:
            skipped += band_q[bi]
            bi += 1
        l = cl - skipped
        q = band_q[bi]
        c0 = band_coff[bi]
        buf = np.zeros((t_total, q))  # (t, k) local accumulator
        for b in range(b_total):
            for v in range(v_total):
                gl = gout[b, v, c0 + l]
                if gl == 0.0:
                    continue  # ReLU-gated zeros are common; sums are unaffected
                for t in range(t_total):
                    src = gather[v, t]
                    for k in range(q):
                        buf[t, k] += gl * xp[b, src, c0 + k]
        w0 = band_woff[bi] + l * q * t_total
        for k in range(q):
            for t in range(t_total):
                gw[w0 + k * t_total + t] = buf[t, k]


@njit(parallel=True, cache=True)
def conv_backward_input(gout_ext, inv_gather, wt_flat, band_woff, band_coff, band_q, gin):
    b_total = gin.shape[0]
    v_total, t_total = inv_gather.shape
    nb = band_q.size
    qmax = np.max(band_q)
    for b in prange(b_total):
        acc = np.empty(qmax)
        for v in range(v_total):
            for bi in range(nb):
                q = band_q[bi]
                c0 = band_coff[bi]
                w0 = band_woff[bi]
                for k in range(q):
                    acc[k] = 0.0
                for t in range(t_total):
                    src = inv_gather[v, t]
                    wt0 = w0 + t * q * q
                    for l in range(q):
                        gv = gout_ext[b, src, c0 + l]
                        wl = wt0 + l * q
                        for k in range(q):
                            acc[k] += gv * wt_flat[wl + k]
                for k in range(q):
                    gin[b, v, c0 + k] = acc[k]
