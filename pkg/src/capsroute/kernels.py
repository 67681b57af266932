"""Patch lowering kernels: im2col gather and its exact adjoint col2im scatter.

These two loops sit under every capsule layer (prediction-vector formation
and its backward pass), so they are JIT-compiled with numba when available.
Set ``CAPSROUTE_NO_NUMBA=1`` to force the pure-numpy fallback; the two paths
are tested element-for-element equal. ``benchmarks/bench_kernels.py`` times
both.

Geometry convention: output position (oy, ox) reads the kh x kw window whose
top-left corner sits at (stride*oy - pad_top, stride*ox - pad_left) with
pad = (k-1)//2 in "same" mode (zero fill outside the grid) and pad = 0 in
"valid" mode. Even kernels are permitted (used by stride-2 transposed
capsule layers); "same" output extents are the floor-divided input extents.
"""

from __future__ import annotations

import os

import numpy as np

_NUMBA_DISABLED = os.environ.get("CAPSROUTE_NO_NUMBA", "") not in ("", "0")

if not _NUMBA_DISABLED:
    # the kernels are serial loops; keeping numba's thread pool at one
    # worker stops it from contending with the BLAS threads
    os.environ.setdefault("NUMBA_NUM_THREADS", "1")
    try:
        from numba import njit

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        HAVE_NUMBA = False
else:
    HAVE_NUMBA = False


def out_extents(h, w, kh, kw, stride, padding):
    """Output grid extents of the lowering for the given geometry."""
    if padding == "same":
        return h // stride, w // stride
    if padding == "valid":
        if kh > h or kw > w:
            raise ValueError(
                f"kernel {kh}x{kw} larger than input {h}x{w} under valid padding"
            )
        return (h - kh) // stride + 1, (w - kw) // stride + 1
    raise ValueError(f"unknown padding mode {padding!r}")


def _pads(kh, kw, padding):
    if padding == "same":
        return (kh - 1) // 2, (kw - 1) // 2
    return 0, 0


def _slot_ranges(ho, stride, off, h):
    # output rows whose read position stride*oy + off lands inside [0, h)
    lo = 0
    while lo < ho and lo * stride + off < 0:
        lo += 1
    hi = ho
    while hi > lo and (hi - 1) * stride + off >= h:
        hi -= 1
    return lo, hi


def _im2col_numpy(x, kh, kw, stride, pad_top, pad_left, ho, wo):
    h, w, c = x.shape
    cols = np.zeros((ho, wo, kh * kw * c), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            iy0 = ky - pad_top
            ix0 = kx - pad_left
            oy_lo, oy_hi = _slot_ranges(ho, stride, iy0, h)
            ox_lo, ox_hi = _slot_ranges(wo, stride, ix0, w)
            if oy_hi <= oy_lo or ox_hi <= ox_lo:
                continue
            slot = ky * kw + kx
            cols[oy_lo:oy_hi, ox_lo:ox_hi, slot * c : (slot + 1) * c] = x[
                oy_lo * stride + iy0 : (oy_hi - 1) * stride + iy0 + 1 : stride,
                ox_lo * stride + ix0 : (ox_hi - 1) * stride + ix0 + 1 : stride,
                :,
            ]
    return cols


def _col2im_numpy(cols, kh, kw, stride, pad_top, pad_left, h, w):
    ho, wo, _ = cols.shape
    c = cols.shape[2] // (kh * kw)
    out = np.zeros((h, w, c), dtype=cols.dtype)
    patches = cols.reshape(ho, wo, kh, kw, c)
    for ky in range(kh):
        for kx in range(kw):
            iy0 = ky - pad_top
            ix0 = kx - pad_left
            oy_lo, oy_hi = _slot_ranges(ho, stride, iy0, h)
            ox_lo, ox_hi = _slot_ranges(wo, stride, ix0, w)
            if oy_hi <= oy_lo or ox_hi <= ox_lo:
                continue
            out[
                oy_lo * stride + iy0 : (oy_hi - 1) * stride + iy0 + 1 : stride,
                ox_lo * stride + ix0 : (ox_hi - 1) * stride + ix0 + 1 : stride,
                :,
            ] += patches[oy_lo:oy_hi, ox_lo:ox_hi, ky, kx, :]
    return out


if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_jit(x, kh, kw, stride, pad_top, pad_left, ho, wo):
        h, w, c = x.shape
        cols = np.zeros((ho, wo, kh * kw * c), dtype=x.dtype)
        for oy in range(ho):
            for ox in range(wo):
                base_y = oy * stride - pad_top
                base_x = ox * stride - pad_left
                for ky in range(kh):
                    iy = base_y + ky
                    if iy < 0 or iy >= h:
                        continue
                    for kx in range(kw):
                        ix = base_x + kx
                        if ix < 0 or ix >= w:
                            continue
                        off = (ky * kw + kx) * c
                        for ch in range(c):
                            cols[oy, ox, off + ch] = x[iy, ix, ch]
        return cols

    @njit(cache=True)
    def _col2im_jit(cols, kh, kw, stride, pad_top, pad_left, h, w):
        ho, wo, kc = cols.shape
        c = kc // (kh * kw)
        out = np.zeros((h, w, c), dtype=cols.dtype)
        for oy in range(ho):
            for ox in range(wo):
                base_y = oy * stride - pad_top
                base_x = ox * stride - pad_left
                for ky in range(kh):
                    iy = base_y + ky
                    if iy < 0 or iy >= h:
                        continue
                    for kx in range(kw):
                        ix = base_x + kx
                        if ix < 0 or ix >= w:
                            continue
                        off = (ky * kw + kx) * c
                        for ch in range(c):
                            out[iy, ix, ch] += cols[oy, ox, off + ch]
        return out


def im2col(x, kh, kw, stride=1, padding="same"):
    """Lower (h, w, c) to patch rows (ho, wo, kh*kw*c); out-of-grid reads are 0."""
    x = np.ascontiguousarray(x)
    h, w, _ = x.shape
    ho, wo = out_extents(h, w, kh, kw, stride, padding)
    pad_top, pad_left = _pads(kh, kw, padding)
    if HAVE_NUMBA:
        return _im2col_jit(x, kh, kw, stride, pad_top, pad_left, ho, wo)
    return _im2col_numpy(x, kh, kw, stride, pad_top, pad_left, ho, wo)


def col2im(cols, kh, kw, stride, out_h, out_w, padding="same"):
    """Exact adjoint of :func:`im2col`: scatter-add patch rows back to (out_h, out_w, c)."""
    cols = np.ascontiguousarray(cols)
    ho, wo = out_extents(out_h, out_w, kh, kw, stride, padding)
    if cols.shape[0] != ho or cols.shape[1] != wo:
        raise ValueError(
            f"patch grid {cols.shape[:2]} inconsistent with output {out_h}x{out_w}"
            f" at stride {stride}"
        )
    if cols.shape[2] % (kh * kw) != 0:
        raise ValueError(f"last extent {cols.shape[2]} not divisible by {kh}*{kw}")
    pad_top, pad_left = _pads(kh, kw, padding)
    if HAVE_NUMBA:
        return _col2im_jit(cols, kh, kw, stride, pad_top, pad_left, out_h, out_w)
    return _col2im_numpy(cols, kh, kw, stride, pad_top, pad_left, out_h, out_w)
