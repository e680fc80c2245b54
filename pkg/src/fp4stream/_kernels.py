"""Hot numeric kernels, each in a numba and a pure-numpy flavour.

The public modules call the un-suffixed dispatch names at the bottom of this
file. The ``*_numpy`` and ``*_numba`` variants stay importable so tests and
the benchmark can compare them directly; they must agree bit for bit, so the
numpy versions avoid pairwise reductions wherever the numba loop would sum
sequentially.
"""

from __future__ import annotations

import numpy as np

from ._backend import USE_NUMBA, njit

BLOCK = 16


# --------------------------------------------------------------------------
# round-to-nearest onto a sorted magnitude grid, ties to the even index
# --------------------------------------------------------------------------


def round_to_grid_numpy(a: np.ndarray, mids: np.ndarray) -> np.ndarray:
    """Index of the nearest grid point for non-negative ``a``.

    ``mids[k]`` is the midpoint between grid points ``k`` and ``k + 1``.
    Values past the last midpoint saturate to the top index.
    """
    a = np.asarray(a, dtype=np.float64)
    idx = np.searchsorted(mids, a, side="left")
    safe = np.minimum(idx, len(mids) - 1)
    tie = (idx < len(mids)) & (mids[safe] == a) & ((idx + 1) % 2 == 0)
    return (idx + tie).astype(np.int64)


@njit(cache=True)
def _round_one(a, mids):
    lo = 0
    hi = mids.shape[0]
    while lo < hi:
        mid = (lo + hi) >> 1
        if mids[mid] < a:
            lo = mid + 1
        else:
            hi = mid
    if lo < mids.shape[0] and mids[lo] == a and (lo + 1) % 2 == 0:
        lo += 1
    return lo


@njit(cache=True)
def round_to_grid_numba(a, mids):
    flat = a.ravel()
    out = np.empty(flat.shape[0], dtype=np.int64)
    for i in range(flat.shape[0]):
        out[i] = _round_one(flat[i], mids)
    return out.reshape(a.shape)


# --------------------------------------------------------------------------
# block quantization: (rows, blocks, 16) float64 -> codes, scale codes, 4/6 bit
# --------------------------------------------------------------------------


def quantize_blocks_numpy(xb, g, search, fp4_mags, fp4_mids, fp8_vals, fp8_mids):
    absx = np.abs(xb)
    # sequential max over the block axis; max is order independent anyway
    amax = absx.max(axis=-1)
    u = xb / g
    umax = amax / g

    def candidate(target):
        sc = round_to_grid_numpy(umax / target, fp8_mids)
        sc = np.where((sc == 0) & (umax > 0), 1, sc)
        s = fp8_vals[sc]
        safe = np.where(s > 0, s, 1.0)
        mag = round_to_grid_numpy(np.abs(u) / safe[..., None], fp4_mids)
        mag = np.where(s[..., None] > 0, mag, 0)
        neg = (u < 0) & (mag > 0)
        codes = mag | (neg.astype(np.int64) << 3)
        recon = np.where(neg, -fp4_mags[mag], fp4_mags[mag]) * s[..., None] * g
        d = xb - recon
        err = np.zeros(xb.shape[:-1], dtype=np.float64)
        for k in range(xb.shape[-1]):
            err += d[..., k] * d[..., k]
        return codes, sc, err

    codes6, sc6, err6 = candidate(6.0)
    if not search:
        return codes6.astype(np.uint8), sc6.astype(np.uint8), np.zeros(sc6.shape, dtype=np.bool_)
    codes4, sc4, err4 = candidate(4.0)
    use4 = err4 < err6
    codes = np.where(use4[..., None], codes4, codes6)
    sc = np.where(use4, sc4, sc6)
    return codes.astype(np.uint8), sc.astype(np.uint8), use4


@njit(cache=True)
def _block_candidate(xrow, g, umax, target, fp4_mags, fp4_mids, fp8_vals, fp8_mids, codes_out):
    sc = _round_one(umax / target, fp8_mids)
    if sc == 0 and umax > 0:
        sc = 1
    s = fp8_vals[sc]
    err = 0.0
    for k in range(xrow.shape[0]):
        u = xrow[k] / g
        if s > 0:
            mag = _round_one(abs(u) / s, fp4_mids)
        else:
            mag = 0
        neg = u < 0 and mag > 0
        v = fp4_mags[mag]
        if neg:
            codes_out[k] = mag | 8
            v = -v
        else:
            codes_out[k] = mag
        d = xrow[k] - v * s * g
        err += d * d
    return sc, err


@njit(cache=True)
def quantize_blocks_numba(xb, g, search, fp4_mags, fp4_mids, fp8_vals, fp8_mids):
    rows, nb, bs = xb.shape
    codes = np.zeros((rows, nb, bs), dtype=np.uint8)
    scales = np.zeros((rows, nb), dtype=np.uint8)
    use4 = np.zeros((rows, nb), dtype=np.bool_)
    c6 = np.zeros(bs, dtype=np.uint8)
    c4 = np.zeros(bs, dtype=np.uint8)
    for r in range(rows):
        for b in range(nb):
            amax = 0.0
            for k in range(bs):
                a = abs(xb[r, b, k])
                if a > amax:
                    amax = a
            umax = amax / g
            sc6, err6 = _block_candidate(xb[r, b], g, umax, 6.0, fp4_mags, fp4_mids, fp8_vals, fp8_mids, c6)
            pick4 = False
            if search:
                sc4, err4 = _block_candidate(xb[r, b], g, umax, 4.0, fp4_mags, fp4_mids, fp8_vals, fp8_mids, c4)
                pick4 = err4 < err6
            if pick4:
                scales[r, b] = sc4
                codes[r, b, :] = c4
                use4[r, b] = True
            else:
                scales[r, b] = sc6
                codes[r, b, :] = c6
    return codes, scales, use4


# --------------------------------------------------------------------------
# block-scaled GEMM on decoded FP4 values; global scales applied by caller
# --------------------------------------------------------------------------


def block_gemm_numpy(va, sa, vb, sb):
    m, nb, _ = va.shape
    n = vb.shape[0]
    out = np.zeros((m, n), dtype=np.float64)
    for b in range(nb):
        # products of FP4 values are multiples of 0.25 and sum exactly
        partial = va[:, b, :] @ vb[:, b, :].T
        out += (sa[:, b][:, None] * sb[:, b][None, :]) * partial
    return out


@njit(cache=True)
def block_gemm_numba(va, sa, vb, sb):
    m, nb, bs = va.shape
    n = vb.shape[0]
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for b in range(nb):
                partial = 0.0
                for k in range(bs):
                    partial += va[i, b, k] * vb[j, b, k]
                acc += (sa[i, b] * sb[j, b]) * partial
            out[i, j] = acc
    return out


# --------------------------------------------------------------------------
# causal FIR over the leading (time) axis with zero left padding
# --------------------------------------------------------------------------


def causal_fir_numpy(x, weights):
    f = x.shape[0]
    out = np.zeros_like(x)
    for k in range(weights.shape[0]):
        if k >= f:
            break
        out[k:] += weights[k] * x[: f - k]
    return out


@njit(cache=True)
def causal_fir_numba(x, weights):
    f, dim = x.shape
    out = np.zeros_like(x)
    for k in range(weights.shape[0]):
        w = weights[k]
        for t in range(k, f):
            for c in range(dim):
                out[t, c] += w * x[t - k, c]
    return out


# --------------------------------------------------------------------------
# natural teacher-forcing mask on the interleaved post-All-to-All order
# --------------------------------------------------------------------------


def natural_mask_table_numpy(length, l_loc, tokens_per_chunk):
    i = np.arange(length)
    r = i % (2 * l_loc)
    t = (i // (2 * l_loc)) * l_loc + (r % l_loc)
    clean = r < l_loc
    ch = t // tokens_per_chunk
    qc, kc = ch[:, None], ch[None, :]
    qclean, kclean = clean[:, None], clean[None, :]
    noisy_q = (kclean & (kc < qc)) | (~kclean & (kc == qc))
    clean_q = kclean & (kc <= qc)
    return np.where(qclean, clean_q, noisy_q)


@njit(cache=True)
def natural_mask_table_numba(length, l_loc, tokens_per_chunk):
    out = np.zeros((length, length), dtype=np.bool_)
    for i in range(length):
        ri = i % (2 * l_loc)
        ci = ((i // (2 * l_loc)) * l_loc + ri % l_loc) // tokens_per_chunk
        iclean = ri < l_loc
        for j in range(length):
            rj = j % (2 * l_loc)
            cj = ((j // (2 * l_loc)) * l_loc + rj % l_loc) // tokens_per_chunk
            jclean = rj < l_loc
            if iclean:
                out[i, j] = jclean and cj <= ci
            elif jclean:
                out[i, j] = cj < ci
            else:
                out[i, j] = cj == ci
    return out


if USE_NUMBA:
    round_to_grid = round_to_grid_numba
    quantize_blocks = quantize_blocks_numba
    block_gemm = block_gemm_numba
    causal_fir = causal_fir_numba
    natural_mask_table = natural_mask_table_numba
else:
    round_to_grid = round_to_grid_numpy
    quantize_blocks = quantize_blocks_numpy
    block_gemm = block_gemm_numpy
    causal_fir = causal_fir_numpy
    natural_mask_table = natural_mask_table_numpy
