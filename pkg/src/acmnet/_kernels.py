"""Hot numeric kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``ACMNET_NUMBA`` is not set
to ``0``. Both paths are always importable under their suffixed names so
they can be checked against each other and benchmarked.
"""

import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("ACMNET_NUMBA", "1") != "0"


def _njit(fn):
    if not _HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# im2col / col2im for 3x3-style strided convolutions
# ---------------------------------------------------------------------------


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col_py(x, k, stride, pad):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    cols = np.zeros((n, oh, ow, c, k, k), dtype=x.dtype)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for ch in range(c):
                    for ki in range(k):
                        r = i * stride + ki - pad
                        if r < 0 or r >= h:
                            continue
                        for kj in range(k):
                            q = j * stride + kj - pad
                            if q < 0 or q >= w:
                                continue
                            cols[b, i, j, ch, ki, kj] = x[b, ch, r, q]
    return cols.reshape(n * oh * ow, c * k * k)


def _col2im_py(cols, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    cols6 = cols.reshape(n, oh, ow, c, k, k)
    dx = np.zeros((n, c, h, w), dtype=cols.dtype)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for ch in range(c):
                    for ki in range(k):
                        r = i * stride + ki - pad
                        if r < 0 or r >= h:
                            continue
                        for kj in range(k):
                            q = j * stride + kj - pad
                            if q < 0 or q >= w:
                                continue
                            dx[b, ch, r, q] += cols6[b, i, j, ch, ki, kj]
    return dx


def im2col_numpy(x, k, stride, pad):
    """Unfold ``(N, C, H, W)`` into rows of ``C*k*k`` patch values."""
    n, c, h, w = x.shape
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, oh, ow, c, k, k), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
            cols[:, :, :, :, ki, kj] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n * oh * ow, c * k * k)


def col2im_numpy(cols, x_shape, k, stride, pad):
    """Adjoint of :func:`im2col_numpy` (scatter-add patch rows back)."""
    n, c, h, w = x_shape
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(w, k, stride, pad)
    cols6 = cols.reshape(n, oh, ow, c, k, k)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += cols6[
                :, :, :, :, ki, kj
            ].transpose(0, 3, 1, 2)
    return dxp[:, :, pad : pad + h, pad : pad + w]


im2col_numba = _njit(_im2col_py)
col2im_numba = _njit(_col2im_py)


# ---------------------------------------------------------------------------
# 2-D correlation with reflect padding (blurs)
# ---------------------------------------------------------------------------


def _filter2d_py(img, kernel):
    c, h, w = img.shape
    kh, kw = kernel.shape
    ph = kh // 2
    pw = kw // 2
    out = np.zeros_like(img)
    for ch in range(c):
        for r in range(h):
            for q in range(w):
                acc = 0.0
                for a in range(kh):
                    rr = r + a - ph
                    # reflect without repeating the edge sample
                    if rr < 0:
                        rr = -rr
                    elif rr >= h:
                        rr = 2 * h - 2 - rr
                    for b in range(kw):
                        wgt = kernel[a, b]
                        if wgt == 0.0:
                            continue
                        qq = q + b - pw
                        if qq < 0:
                            qq = -qq
                        elif qq >= w:
                            qq = 2 * w - 2 - qq
                        acc += wgt * img[ch, rr, qq]
                out[ch, r, q] = acc
    return out


def filter2d_numpy(img, kernel):
    """Correlate each channel of ``(C, H, W)`` with an odd-sized kernel."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(img, ((0, 0), (ph, ph), (pw, pw)), mode="reflect")
    h, w = img.shape[1:]
    out = np.zeros_like(img)
    for a in range(kh):
        for b in range(kw):
            if kernel[a, b] != 0.0:
                out += kernel[a, b] * xp[:, a : a + h, b : b + w]
    return out


filter2d_numba = _njit(_filter2d_py)


# ---------------------------------------------------------------------------
# Bilinear sampling at arbitrary source coordinates, zero padding
# ---------------------------------------------------------------------------


def _bilinear_sample_py(img, src_r, src_c):
    c, h, w = img.shape
    oh, ow = src_r.shape
    out = np.zeros((c, oh, ow), dtype=img.dtype)
    for i in range(oh):
        for j in range(ow):
            y = src_r[i, j]
            x = src_c[i, j]
            y0 = int(np.floor(y))
            x0 = int(np.floor(x))
            fy = y - y0
            fx = x - x0
            for dy in range(2):
                yy = y0 + dy
                if yy < 0 or yy >= h:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                if wy == 0.0:
                    continue
                for dx in range(2):
                    xx = x0 + dx
                    if xx < 0 or xx >= w:
                        continue
                    wx = fx if dx == 1 else 1.0 - fx
                    if wx == 0.0:
                        continue
                    for ch in range(c):
                        out[ch, i, j] += wy * wx * img[ch, yy, xx]
    return out


def bilinear_sample_numpy(img, src_r, src_c):
    """Sample ``(C, H, W)`` at float row/col grids; outside pixels read as 0."""
    c, h, w = img.shape
    y0 = np.floor(src_r).astype(np.int64)
    x0 = np.floor(src_c).astype(np.int64)
    fy = src_r - y0
    fx = src_c - x0
    out = np.zeros((c,) + src_r.shape, dtype=img.dtype)
    for dy in (0, 1):
        yy = y0 + dy
        wy = fy if dy == 1 else 1.0 - fy
        for dx in (0, 1):
            xx = x0 + dx
            wx = fx if dx == 1 else 1.0 - fx
            wgt = wy * wx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w) & (wgt != 0.0)
            vals = img[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += np.where(ok, wgt, 0.0) * vals
    return out


bilinear_sample_numba = _njit(_bilinear_sample_py)


# ---------------------------------------------------------------------------
# Windowed hit test for recall@N
# ---------------------------------------------------------------------------


def _first_hit_rank_py(ranked, gt, radius):
    nq, k = ranked.shape
    out = np.full(nq, -1, dtype=np.int64)
    for i in range(nq):
        for r in range(k):
            if abs(ranked[i, r] - gt[i]) <= radius:
                out[i] = r
                break
    return out


def first_hit_rank_numpy(ranked, gt, radius):
    """Zero-based rank of the first in-window retrieval per query, -1 if none."""
    hit = np.abs(ranked - gt[:, None]) <= radius
    first = np.argmax(hit, axis=1)
    return np.where(hit.any(axis=1), first, -1).astype(np.int64)


first_hit_rank_numba = _njit(_first_hit_rank_py)


if USE_NUMBA:
    im2col = im2col_numba
    col2im = col2im_numba
    filter2d = filter2d_numba
    bilinear_sample = bilinear_sample_numba
    first_hit_rank = first_hit_rank_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    filter2d = filter2d_numpy
    bilinear_sample = bilinear_sample_numpy
    first_hit_rank = first_hit_rank_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
