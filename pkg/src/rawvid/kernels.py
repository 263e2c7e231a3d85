"""Hot numeric kernels with numba and pure-numpy implementations.

The numba path is used when numba imports and ``RAWVID_DISABLE_NUMBA`` is unset
(or ``0``). Both implementations stay importable as ``numba_<name>`` and
``numpy_<name>`` so tests and ``benchmarks/bench_kernels.py`` can compare them.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

DISABLED = os.environ.get("RAWVID_DISABLE_NUMBA", "") not in ("", "0")
USE_NUMBA = numba is not None and not DISABLED

# Normalized-convolution weights; reproduce bilinear demosaic in the interior.
DEMOSAIC_WEIGHTS = np.array([[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]])


def _jit(fn):
    if numba is None:
        return None
    return numba.njit(cache=True, nogil=True)(fn)


# -- bilinear demosaic --------------------------------------------------------


def _demosaic_loop(mosaic, cfa, weights):
    h, w = mosaic.shape
    out = np.empty((3, h, w))
    for c in range(3):
        for y in range(h):
            for x in range(w):
                if cfa[y, x] == c:
                    out[c, y, x] = mosaic[y, x]
                    continue
                num = 0.0
                den = 0.0
                for dy in range(-1, 2):
                    yy = y + dy
                    if yy < 0 or yy >= h:
                        continue
                    for dx in range(-1, 2):
                        xx = x + dx
                        if xx < 0 or xx >= w or cfa[yy, xx] != c:
                            continue
                        wt = weights[dy + 1, dx + 1]
                        num += wt * mosaic[yy, xx]
                        den += wt
                out[c, y, x] = num / den
    return out


numba_demosaic = _jit(_demosaic_loop)


def numpy_demosaic(mosaic, cfa, weights=DEMOSAIC_WEIGHTS):
    h, w = mosaic.shape
    out = np.empty((3, h, w))
    vals = np.pad(mosaic, 1)
    for c in range(3):
        own = cfa == c
        mask = np.pad(own, 1).astype(np.float64)
        num = np.zeros((h, w))
        den = np.zeros((h, w))
        for dy in range(3):
            for dx in range(3):
                m = mask[dy:dy + h, dx:dx + w]
                num += weights[dy, dx] * vals[dy:dy + h, dx:dx + w] * m
                den += weights[dy, dx] * m
        with np.errstate(invalid="ignore", divide="ignore"):
            out[c] = np.where(own, mosaic, num / den)
    return out


def demosaic(mosaic, cfa):
    """Bilinear demosaic of a float mosaic given its per-pixel channel map."""
    mosaic = np.ascontiguousarray(mosaic, dtype=np.float64)
    cfa = np.ascontiguousarray(cfa, dtype=np.int64)
    if USE_NUMBA:
        return numba_demosaic(mosaic, cfa, DEMOSAIC_WEIGHTS)
    return numpy_demosaic(mosaic, cfa)


# -- per-pixel temporal statistics -------------------------------------------


def _mean_var_loop(stack):
    # shifted by the first sample so constant pixels give exactly zero variance
    n, h, w = stack.shape
    mean = np.empty((h, w))
    var = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            k = stack[0, y, x]
            s = 0.0
            for i in range(n):
                s += stack[i, y, x] - k
            m = s / n
            ss = 0.0
            for i in range(n):
                d = stack[i, y, x] - k - m
                ss += d * d
            mean[y, x] = k + m
            var[y, x] = ss / (n - 1)
    return mean, var


numba_temporal_mean_var = _jit(_mean_var_loop)


def numpy_temporal_mean_var(stack):
    shifted = stack - stack[0]
    return stack[0] + shifted.mean(axis=0), shifted.var(axis=0, ddof=1)


def temporal_mean_var(stack):
    """Per-pixel mean and unbiased variance over the leading (frame) axis."""
    stack = np.ascontiguousarray(stack, dtype=np.float64)
    if stack.shape[0] < 2:
        raise ValueError("need at least two frames for a variance")
    if USE_NUMBA:
        return numba_temporal_mean_var(stack)
    return numpy_temporal_mean_var(stack)


# -- separable filter with symmetric (half-sample) reflection ------------------


def _separable_loop(img, taps):
    h, w = img.shape
    k = taps.shape[0]
    r = k // 2
    tmp = np.empty((h, w))
    out = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for t in range(k):
                xx = x + t - r
                if xx < 0:
                    xx = -xx - 1
                elif xx >= w:
                    xx = 2 * w - xx - 1
                acc += taps[t] * img[y, xx]
            tmp[y, x] = acc
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for t in range(k):
                yy = y + t - r
                if yy < 0:
                    yy = -yy - 1
                elif yy >= h:
                    yy = 2 * h - yy - 1
                acc += taps[t] * tmp[yy, x]
            out[y, x] = acc
    return out


numba_separable_filter = _jit(_separable_loop)


def numpy_separable_filter(img, taps):
    h, w = img.shape
    k = taps.shape[0]
    r = k // 2
    p = np.pad(img, ((0, 0), (r, r)), mode="symmetric")
    tmp = np.zeros((h, w))
    for t in range(k):
        tmp += taps[t] * p[:, t:t + w]
    p = np.pad(tmp, ((r, r), (0, 0)), mode="symmetric")
    out = np.zeros((h, w))
    for t in range(k):
        out += taps[t] * p[t:t + h, :]
    return out


def separable_filter(img, taps):
    """Correlate rows then columns with an odd-length 1D kernel, mirroring borders.

    Kernels wider than twice the image fold more than once and are not supported.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    taps = np.ascontiguousarray(taps, dtype=np.float64)
    if taps.shape[0] % 2 == 0 or taps.shape[0] // 2 > min(img.shape):
        raise ValueError("kernel must be odd and no wider than the image")
    if USE_NUMBA:
        return numba_separable_filter(img, taps)
    return numpy_separable_filter(img, taps)


# -- modulated deformable convolution, direct evaluation ------------------------


def _dconv_loop(x, offset, mask, weight, bias):
    c_in, h, w = x.shape
    c_out, _, kh, kw = weight.shape
    ph = (kh - 1) // 2
    pw = (kw - 1) // 2
    out = np.empty((c_out, h, w))
    cols = np.empty((c_in, kh * kw))
    for y in range(h):
        for xx in range(w):
            for i in range(kh):
                for j in range(kw):
                    k = i * kw + j
                    py = y + i - ph + offset[2 * k, y, xx]
                    px = xx + j - pw + offset[2 * k + 1, y, xx]
                    y0 = int(np.floor(py))
                    x0 = int(np.floor(px))
                    fy = py - y0
                    fx = px - x0
                    m = mask[k, y, xx]
                    for c in range(c_in):
                        v = 0.0
                        if 0 <= y0 < h and 0 <= x0 < w:
                            v += (1 - fy) * (1 - fx) * x[c, y0, x0]
                        if 0 <= y0 < h and 0 <= x0 + 1 < w:
                            v += (1 - fy) * fx * x[c, y0, x0 + 1]
                        if 0 <= y0 + 1 < h and 0 <= x0 < w:
                            v += fy * (1 - fx) * x[c, y0 + 1, x0]
                        if 0 <= y0 + 1 < h and 0 <= x0 + 1 < w:
                            v += fy * fx * x[c, y0 + 1, x0 + 1]
                        cols[c, k] = v * m
            for o in range(c_out):
                acc = bias[o]
                for c in range(c_in):
                    for k in range(kh * kw):
                        acc += weight[o, c, k // kw, k % kw] * cols[c, k]
                out[o, y, xx] = acc
    return out


numba_dconv = _jit(_dconv_loop)


def numpy_dconv(x, offset, mask, weight, bias):
    c_in, h, w = x.shape
    c_out, _, kh, kw = weight.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cols = np.empty((c_in, kh * kw, h, w))
    for k in range(kh * kw):
        i, j = divmod(k, kw)
        py = gy + i - ph + offset[2 * k]
        px = gx + j - pw + offset[2 * k + 1]
        y0 = np.floor(py).astype(np.int64)
        x0 = np.floor(px).astype(np.int64)
        fy, fx = py - y0, px - x0
        v = np.zeros((c_in, h, w))
        for yy, xx, wt in (
            (y0, x0, (1 - fy) * (1 - fx)),
            (y0, x0 + 1, (1 - fy) * fx),
            (y0 + 1, x0, fy * (1 - fx)),
            (y0 + 1, x0 + 1, fy * fx),
        ):
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            v += np.where(ok, wt * x[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], 0.0)
        cols[:, k] = v * mask[k]
    return np.einsum("ock,ckhw->ohw", weight.reshape(c_out, c_in, -1), cols) + bias[:, None, None]


def dconv_reference(x, offset, mask, weight, bias=None):
    """Direct evaluation of modulated deformable convolution for one image.

    ``x`` is ``(C, H, W)``, ``offset`` is ``(2K, H, W)`` holding ``(dy, dx)`` per
    kernel tap in row-major tap order, ``mask`` is ``(K, H, W)``, ``weight`` is
    ``(O, C, kh, kw)``. Stride 1, same padding, zeros outside the image.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    offset = np.ascontiguousarray(offset, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.float64)
    weight = np.ascontiguousarray(weight, dtype=np.float64)
    if bias is None:
        bias = np.zeros(weight.shape[0])
    bias = np.ascontiguousarray(bias, dtype=np.float64)
    k = weight.shape[2] * weight.shape[3]
    if offset.shape[0] != 2 * k or mask.shape[0] != k:
        raise ValueError(f"offset/mask channels do not match a {k}-tap kernel")
    if USE_NUMBA:
        return numba_dconv(x, offset, mask, weight, bias)
    return numpy_dconv(x, offset, mask, weight, bias)
