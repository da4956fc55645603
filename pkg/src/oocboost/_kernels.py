"""Numba kernels operating directly on bit-packed ELLPACK symbol streams.

Symbols are stored LSB-first in little-endian uint64 words: symbol ``i`` of a
stream with width ``bits`` starts at bit ``i * bits``. Rows are laid out with a
fixed stride and padded with the sentinel symbol, which is always the last
value in a row once it appears.
"""
import numpy as np
from numba import njit

_U64 = np.uint64


def words_for(n_symbols, bits):
    return (n_symbols * bits + 63) // 64


@njit(cache=True, inline="always")
def get_symbol(words, i, bits):
    off = i * bits
    w = off >> 6
    s = _U64(off & 63)
    # the high part comes from the next word (clamped at the end of the stream);
    # shifting by (63 - s) then 1 keeps s == 0 well defined
    w2 = min(w + 1, words.shape[0] - 1)
    v = (words[w] >> s) | ((words[w2] << (_U64(63) - s)) << _U64(1))
    mask = (_U64(1) << _U64(bits)) - _U64(1)
    return np.int64(v & mask)


@njit(cache=True, inline="always")
def put_symbol(words, i, bits, value):
    # destination must be zero-initialised
    off = i * bits
    w = off >> 6
    s = off & 63
    v = _U64(value)
    words[w] |= v << _U64(s)
    if s + bits > 64:
        words[w + 1] |= v >> _U64(64 - s)


@njit(cache=True)
def pack(symbols, bits, out):
    for i in range(symbols.shape[0]):
        put_symbol(out, i, bits, symbols[i])


@njit(cache=True)
def unpack(words, bits, start, count, out):
    for i in range(count):
        out[i] = get_symbol(words, start + i, bits)


@njit(cache=True)
def bin_entries(features, values, cut_values, feature_offsets, out):
    """Global bin of each entry: offset of its feature plus the first cut >= value."""
    for k in range(features.shape[0]):
        f = features[k]
        lo = feature_offsets[f]
        hi = feature_offsets[f + 1]
        last = hi - 1
        v = values[k]
        while lo < hi:
            mid = (lo + hi) >> 1
            if cut_values[mid] < v:
                lo = mid + 1
            else:
                hi = mid
        if lo > last:
            lo = last
        out[k] = lo


@njit(cache=True)
def node_sums(rows, gpair, scale):
    g = np.int64(0)
    h = np.int64(0)
    for k in range(rows.shape[0]):
        r = rows[k]
        g += np.int64(np.rint(np.float64(gpair[r, 0]) * scale))
        h += np.int64(np.rint(np.float64(gpair[r, 1]) * scale))
    return g, h


@njit(cache=True)
def build_histogram(words, bits, stride, sentinel, base, rows, gpair, scale, hist):
    """Accumulate fixed-point gradient sums of ``rows`` into ``hist``.

    Integer accumulation makes the result independent of row and page order.
    """
    for k in range(rows.shape[0]):
        r = rows[k]
        g = np.int64(np.rint(np.float64(gpair[r, 0]) * scale))
        h = np.int64(np.rint(np.float64(gpair[r, 1]) * scale))
        start = (r - base) * stride
        for j in range(stride):
            sym = get_symbol(words, start + j, bits)
            if sym == sentinel:
                break
            hist[sym, 0] += g
            hist[sym, 1] += h


@njit(cache=True, inline="always")
def _find_bin(words, bits, stride, sentinel, local_row, fbeg, fend):
    """Symbol of the row falling in [fbeg, fend), or -1.

    Rows are sorted ascending (padding is the largest symbol), so a lower-bound
    search finds the only candidate.
    """
    start = local_row * stride
    lo = 0
    hi = stride
    while lo < hi:
        mid = (lo + hi) >> 1
        if get_symbol(words, start + mid, bits) < fbeg:
            lo = mid + 1
        else:
            hi = mid
    if lo == stride:
        return -1
    sym = get_symbol(words, start + lo, bits)
    if sym >= fend:
        return -1
    return sym


@njit(cache=True)
def partition_rows(words, bits, stride, sentinel, base, rows, fbeg, fend,
                   split_bin, default_left, go_left):
    for k in range(rows.shape[0]):
        b = _find_bin(words, bits, stride, sentinel, rows[k] - base, fbeg, fend)
        if b < 0:
            go_left[k] = default_left
        else:
            go_left[k] = b <= split_bin


@njit(cache=True)
def route_rows(words, bits, stride, sentinel, n_rows, left, right, fbeg, fend,
               split_bin, default_left, out_leaf):
    for i in range(n_rows):
        node = 0
        while left[node] >= 0:
            b = _find_bin(words, bits, stride, sentinel, i, fbeg[node], fend[node])
            if b < 0:
                go = default_left[node]
            else:
                go = b <= split_bin[node]
            node = left[node] if go else right[node]
        out_leaf[i] = node


@njit(cache=True)
def route_binned(bins, left, right, feature, split_bin, default_left, out_leaf):
    """Route rows of a dense global-bin matrix (-1 = missing) through one tree."""
    for i in range(bins.shape[0]):
        node = 0
        while left[node] >= 0:
            b = bins[i, feature[node]]
            if b < 0:
                go = default_left[node]
            else:
                go = b <= split_bin[node]
            node = left[node] if go else right[node]
        out_leaf[i] = node


@njit(cache=True)
def copy_rows(src_words, bits, stride, src_rows, dst_words, dst_start):
    for k in range(src_rows.shape[0]):
        s0 = src_rows[k] * stride
        d0 = (dst_start + k) * stride
        for j in range(stride):
            put_symbol(dst_words, d0 + j, bits, get_symbol(src_words, s0 + j, bits))


@njit(cache=True)
def best_split(hist, node_g, node_h, feature_offsets, scale, reg_lambda, gamma, min_child_weight):
    """Scan every (bin, default direction) boundary of a fixed-point histogram.

    Missing rows per feature are the node total minus the feature's bin sums.
    Ties keep the first candidate: lowest bin, then default-left. Returns
    (bin, default_left, gain, left_g, left_h); bin is -1 when nothing has
    positive gain.
    """
    G = np.float64(node_g) / scale
    H = np.float64(node_h) / scale
    parent = G * G / (H + reg_lambda)
    best_gain = 0.0
    best_bin = -1
    best_left = True
    best_g = np.int64(0)
    best_h = np.int64(0)
    for f in range(feature_offsets.shape[0] - 1):
        b0 = feature_offsets[f]
        b1 = feature_offsets[f + 1]
        tg = np.int64(0)
        th = np.int64(0)
        for b in range(b0, b1):
            tg += hist[b, 0]
            th += hist[b, 1]
        mg = node_g - tg
        mh = node_h - th
        cg = np.int64(0)
        ch = np.int64(0)
        for b in range(b0, b1):
            cg += hist[b, 0]
            ch += hist[b, 1]
            for d in range(2):
                if d == 0:
                    lg = cg + mg
                    lh = ch + mh
                else:
                    lg = cg
                    lh = ch
                GL = np.float64(lg) / scale
                HL = np.float64(lh) / scale
                GR = np.float64(node_g - lg) / scale
                HR = np.float64(node_h - lh) / scale
                if HL < min_child_weight or HR < min_child_weight:
                    continue
                if HL + reg_lambda <= 0.0 or HR + reg_lambda <= 0.0:
                    continue
                gain = 0.5 * (GL * GL / (HL + reg_lambda) + GR * GR / (HR + reg_lambda) - parent) - gamma
                if gain > best_gain:
                    best_gain = gain
                    best_bin = b
                    best_left = d == 0
                    best_g = lg
                    best_h = lh
    return best_bin, best_left, best_gain, best_g, best_h
