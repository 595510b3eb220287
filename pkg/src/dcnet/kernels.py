"""Composite-convolution kernels: band-wise spatial convolution of SH
coefficient arrays, forward and backward, in 1/2/3 spatial dimensions.

Data layout used throughout:

* activations are ``(B, V, P)`` with ``V = M**ndim`` flattened spatial
  sites (C order) and ``P`` SH channels;
* a filter bank is one flat float64 vector, bands concatenated, each band
  stored C-order as ``(l, k, tap)`` with ``q = 2n+1`` orders and
  ``T = J**ndim`` taps;
* convolution is the true (flipped) discrete convolution with zero padding
  and "same" output size:  out[x, l] = sum_{k, tau} in[x - tau, k] * w[l, k, tau].

The gather/scatter index tables reduce every dimensionality to the same
flat form, so one pair of kernels serves the 3-D, 2-D and 1-D cases.
Inputs are prepared once into a :class:`ConvPack` and shared by all filter
banks reading the same activation (the three network branches), which cuts
the dominant memory traffic of the im2col path.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import backends
from .sh import band_degrees, num_coeffs


@dataclass(frozen=True)
class ConvMeta:
    """Precomputed index tables for one (spatial size, ndim, J, n_max) case."""

    m: int
    ndim: int
    j: int
    n_max: int
    pad_idx: np.ndarray     # (V,)   where interior sites live in the padded flat array
    gather: np.ndarray      # (V, T) padded-flat source index of tap t at site v
    inv_gather: np.ndarray  # (V, T) output site reading site v at tap t, or V (dummy)
    band_q: np.ndarray      # (nb,)  2n+1 per band
    band_coff: np.ndarray   # (nb,)  first channel of each band
    band_woff: np.ndarray   # (nb,)  offset of each band in the flat weight vector
    n_weights: int

    @property
    def v(self) -> int:
        return self.m ** self.ndim

    @property
    def vp(self) -> int:
        return (self.m + self.j - 1) ** self.ndim

    @property
    def t(self) -> int:
        return self.j ** self.ndim

    @property
    def p(self) -> int:
        return num_coeffs(self.n_max)

    def band_views(self, wflat: np.ndarray):
        """Per-band (q, q, T) views of a flat weight vector."""
        t = self.t
        return [
            wflat[w0 : w0 + q * q * t].reshape(q, q, t)
            for q, w0 in zip(self.band_q, self.band_woff)
        ]


@lru_cache(maxsize=None)
def get_meta(m: int, ndim: int, j: int, n_max: int) -> ConvMeta:
    if j % 2 == 0 or j < 1:
        raise ValueError("kernel size must be odd and positive")
    if ndim not in (1, 2, 3):
        raise ValueError("ndim must be 1, 2 or 3")
    h = j // 2
    pm = m + 2 * h
    sites = np.indices((m,) * ndim).reshape(ndim, -1).T          # (V, ndim)
    taps = np.indices((j,) * ndim).reshape(ndim, -1).T - h       # (T, ndim)
    v = sites.shape[0]

    pad_idx = np.ravel_multi_index((sites + h).T, (pm,) * ndim).astype(np.int64)
    src = sites[:, None, :] - taps[None, :, :] + h               # (V, T, ndim)
    gather = np.ravel_multi_index(src.transpose(2, 0, 1), (pm,) * ndim).astype(np.int64)
    out = sites[:, None, :] + taps[None, :, :]
    valid = np.all((out >= 0) & (out < m), axis=2)
    out_flat = np.ravel_multi_index(
        np.clip(out, 0, m - 1).transpose(2, 0, 1), (m,) * ndim
    ).astype(np.int64)
    inv_gather = np.where(valid, out_flat, v)

    t = j ** ndim
    qs, coffs, woffs = [], [], []
    c0 = w0 = 0
    for n in band_degrees(n_max):
        q = 2 * n + 1
        qs.append(q)
        coffs.append(c0)
        woffs.append(w0)
        c0 += q
        w0 += q * q * t
    return ConvMeta(
        m=m,
        ndim=ndim,
        j=j,
        n_max=n_max,
        pad_idx=pad_idx,
        gather=np.ascontiguousarray(gather),
        inv_gather=np.ascontiguousarray(inv_gather),
        band_q=np.array(qs, dtype=np.int64),
        band_coff=np.array(coffs, dtype=np.int64),
        band_woff=np.array(woffs, dtype=np.int64),
        n_weights=w0,
    )


@dataclass
class ConvPack:
    """One activation prepared for convolution under the active backend.

    The numpy path stores gathered im2col patches, pre-split per band into
    contiguous (B*V, T*q) blocks ready for matmul; the numba path stores
    the zero-padded flat array that its kernels index directly.  Preparing
    once lets every filter bank reading the same activation (the three
    network branches) reuse the work.
    """

    meta: ConvMeta
    backend: str
    batch: int
    xp: np.ndarray | None = None        # (B, Vp, P)
    band_patches: list | None = None    # per band: (B*V, T*q)


def pack_input(x: np.ndarray, meta: ConvMeta) -> ConvPack:
    """Prepare a (B, V, P) activation for one or more convolutions."""
    x = np.ascontiguousarray(x)
    b = x.shape[0]
    backend = backends.active_backend()
    xp = np.zeros((b, meta.vp, x.shape[2]))
    xp[:, meta.pad_idx, :] = x
    if backend == "numba":
        return ConvPack(meta, backend, b, xp=xp)
    patches = xp[:, meta.gather, :]                               # (B, V, T, P)
    t = meta.t
    band_patches = [
        np.ascontiguousarray(patches[..., c0 : c0 + q]).reshape(b * meta.v, t * q)
        for c0, q in zip(meta.band_coff, meta.band_q)
    ]
    return ConvPack(meta, backend, b, band_patches=band_patches)


def _transpose_weights(wflat: np.ndarray, meta: ConvMeta, order) -> np.ndarray:
    """Concatenate per-band weight blocks permuted from (l, k, t) to ``order``."""
    return np.concatenate([wb.transpose(order).ravel() for wb in meta.band_views(wflat)])


def conv_apply(pack: ConvPack, wflat: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Composite convolution of a packed activation; returns (B, V, P)."""
    meta = pack.meta
    if pack.backend == "numba":
        from . import _kernels_numba as nb

        out = np.empty((pack.batch, meta.v, meta.p))
        wt = _transpose_weights(wflat, meta, (2, 1, 0))           # (t, k, l)
        nb.conv_forward(
            pack.xp, meta.gather, wt, meta.band_woff, meta.band_coff, meta.band_q, bias, out
        )
        return out
    b, v, t = pack.batch, meta.v, meta.t
    out = np.empty((b, v, meta.p))
    for c0, q, wb, pb in zip(meta.band_coff, meta.band_q, meta.band_views(wflat), pack.band_patches):
        wm = wb.transpose(2, 1, 0).reshape(t * q, q)              # rows (t, k) -> l
        out[..., c0 : c0 + q] = (pb @ wm).reshape(b, v, q)
    out += bias
    return out


def conv_weight_grads(pack: ConvPack, gout: np.ndarray):
    """Weight and bias gradients of one convolution; returns (gw, gbias)."""
    meta = pack.meta
    gout = np.ascontiguousarray(gout)
    gbias = gout.sum(axis=(0, 1))
    gw = np.empty(meta.n_weights)
    if pack.backend == "numba":
        from . import _kernels_numba as nb

        nb.conv_backward_weights(
            gout, pack.xp, meta.gather, meta.band_woff, meta.band_coff, meta.band_q, gw
        )
        return gw, gbias
    b, v, t = pack.batch, meta.v, meta.t
    for c0, q, w0, pm in zip(meta.band_coff, meta.band_q, meta.band_woff, pack.band_patches):
        gm = gout[..., c0 : c0 + q].reshape(b * v, q)
        gwm = gm.T @ pm                                           # (l, (t, k))
        gw[w0 : w0 + q * q * t] = gwm.reshape(q, t, q).transpose(0, 2, 1).ravel()
    return gw, gbias


def conv_input_grad(gout: np.ndarray, wflat: np.ndarray, meta: ConvMeta) -> np.ndarray:
    """Gradient w.r.t. the convolution input; returns (B, V, P)."""
    gout = np.ascontiguousarray(gout)
    b, _, p = gout.shape
    gout_ext = np.concatenate([gout, np.zeros((b, 1, p))], axis=1)
    if backends.active_backend() == "numba":
        from . import _kernels_numba as nb

        gin = np.empty((b, meta.v, p))
        wt = _transpose_weights(wflat, meta, (2, 0, 1))           # (t, l, k)
        nb.conv_backward_input(
            gout_ext, meta.inv_gather, wt, meta.band_woff, meta.band_coff, meta.band_q, gin
        )
        return gin
    gathered = gout_ext[:, meta.inv_gather, :]                    # (B, V, T, P)
    t = meta.t
    gin = np.empty((b, meta.v, p))
    for c0, q, wb in zip(meta.band_coff, meta.band_q, meta.band_views(wflat)):
        wm2 = wb.transpose(2, 0, 1).reshape(t * q, q)             # rows (t, l) -> k
        gg = np.ascontiguousarray(gathered[..., c0 : c0 + q]).reshape(b * meta.v, t * q)
        gin[..., c0 : c0 + q] = (gg @ wm2).reshape(b, meta.v, q)
    return gin
