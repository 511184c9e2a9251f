"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature
and the same floating point operation order, so both backends return
identical results. ``jlcm.kernels`` picks one at import time.
"""
from __future__ import annotations

import heapq

import numpy as np


def pack_bits(indices: np.ndarray, bits: int) -> bytes:
    idx = np.ascontiguousarray(indices, dtype=np.int64).ravel()
    if idx.size == 0:
        return b""
    shifts = np.arange(bits, dtype=np.int64)
    stream = ((idx[:, None] >> shifts) & 1).astype(np.uint8).ravel()
    return np.packbits(stream, bitorder="little").tobytes()


def unpack_bits(buf: bytes, bits: int, count: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    raw = np.frombuffer(buf, dtype=np.uint8)
    stream = np.unpackbits(raw, bitorder="little")[: count * bits]
    weights = np.left_shift(np.int64(1), np.arange(bits, dtype=np.int64))
    return stream.reshape(count, bits).astype(np.int64) @ weights


def nearest_codeword(values: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the closest codeword for each value; ties go to the lower index."""
    v = np.ascontiguousarray(values, dtype=np.float64).ravel()
    c = np.ascontiguousarray(codebook, dtype=np.float64)
    out = np.empty(v.size, dtype=np.int64)
    chunk = 1 << 16
    for start in range(0, v.size, chunk):
        block = v[start : start + chunk]
        out[start : start + chunk] = np.argmin(np.abs(block[:, None] - c[None, :]), axis=1)
    return out


def _segment_cost(s1, s2, i, j):
    cnt = (j - i + 1).astype(np.float64)
    a = s1[j + 1] - s1[i]
    c = (s2[j + 1] - s2[i]) - a * a / cnt
    return np.maximum(c, 0.0)


def kmeans1d_dp(x: np.ndarray, k: int) -> np.ndarray:
    """Optimal contiguous k-partition of sorted ``x`` under squared error.

    Divide-and-conquer over the monotone split index, one vectorized pass
    per recursion depth. Returns the k+1 segment offsets.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.size
    s1 = np.concatenate(([0.0], np.cumsum(x)))
    s2 = np.concatenate(([0.0], np.cumsum(x * x)))
    j_all = np.arange(n, dtype=np.int64)
    prev = _segment_cost(s1, s2, np.zeros(n, dtype=np.int64), j_all)
    split = np.zeros((k, n), dtype=np.int64)

    for level in range(1, k):
        cur = np.full(n, np.inf)
        # segments: lo, hi, optlo, opthi
        segs = np.array([[level, n - 1, level, n - 1]], dtype=np.int64)
        while segs.size:
            lo, hi, olo, ohi = segs.T
            mid = (lo + hi) // 2
            a = olo
            b = np.minimum(mid, ohi)
            lens = b - a + 1
            offsets = np.concatenate(([0], np.cumsum(lens)[:-1]))
            seg_id = np.repeat(np.arange(lens.size), lens)
            i = a[seg_id] + (np.arange(seg_id.size) - offsets[seg_id])
            j = mid[seg_id]
            val = prev[i - 1] + _segment_cost(s1, s2, i, j)
            best_val = np.minimum.reduceat(val, offsets)
            hit = np.flatnonzero(val == best_val[seg_id])
            _, first = np.unique(seg_id[hit], return_index=True)
            best_i = i[hit[first]]
            cur[mid] = best_val
            split[level, mid] = best_i

            left = np.stack([lo, mid - 1, olo, best_i], axis=1)[lo <= mid - 1]
            right = np.stack([mid + 1, hi, best_i, ohi], axis=1)[mid + 1 <= hi]
            segs = np.concatenate([left, right]).reshape(-1, 4)
        prev = cur

    bounds = np.empty(k + 1, dtype=np.int64)
    bounds[k] = n
    end = n - 1
    for level in range(k - 1, 0, -1):
        start = split[level, end]
        bounds[level] = start
        end = start - 1
    bounds[0] = 0
    return bounds


def ward_1d(x: np.ndarray, k: int) -> np.ndarray:
    """Ward agglomeration of sorted scalars; only adjacent clusters can merge.

    Ties go to the leftmost pair. Returns the k+1 segment offsets.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.size
    sums = x.tolist()
    counts = [1.0] * n
    nxt = list(range(1, n + 1))
    prv = list(range(-1, n - 1))
    stamp = [0] * n
    alive = [True] * n

    def cost(a, b):
        d = sums[a] / counts[a] - sums[b] / counts[b]
        return (counts[a] * counts[b] / (counts[a] + counts[b])) * d * d

    heap = [(cost(a, a + 1), a, 0) for a in range(n - 1)]
    heapq.heapify(heap)
    remaining = n
    while remaining > k:
        c, a, st = heapq.heappop(heap)
        if not alive[a] or st != stamp[a]:
            continue
        b = nxt[a]
        sums[a] += sums[b]
        counts[a] += counts[b]
        alive[b] = False
        nxt[a] = nxt[b]
        if nxt[a] < n:
            prv[nxt[a]] = a
        remaining -= 1
        stamp[a] += 1
        if nxt[a] < n:
            heapq.heappush(heap, (cost(a, nxt[a]), a, stamp[a]))
        p = prv[a]
        if p >= 0:
            stamp[p] += 1
            heapq.heappush(heap, (cost(p, a), p, stamp[p]))

    starts = [i for i in range(n) if alive[i]]
    return np.array(starts + [n], dtype=np.int64)


def ward_general(cost: np.ndarray, k: int) -> np.ndarray:
    """Ward agglomeration from an initial pairwise merge-cost matrix.

    ``cost[i, j]`` is half the squared distance between samples i and j.
    Clusters are merged with Lance-Williams updates; the merged cluster keeps
    the lower slot and ties go to the lowest (i, j). Returns the surviving
    slot index for every sample.
    """
    delta = np.array(cost, dtype=np.float64, copy=True)
    n = delta.shape[0]
    np.fill_diagonal(delta, np.inf)
    size = np.ones(n)
    owner = np.arange(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    remaining = n
    while remaining > k:
        flat = int(np.argmin(delta))
        i, j = divmod(flat, n)
        if i > j:
            i, j = j, i
        dij = delta[i, j]
        ni, nj = size[i], size[j]
        nm = size
        upd = ((ni + nm) * delta[i] + (nj + nm) * delta[j] - nm * dij) / (ni + nj + nm)
        upd[~active] = np.inf
        upd[i] = np.inf
        upd[j] = np.inf
        delta[i, :] = upd
        delta[:, i] = upd
        delta[j, :] = np.inf
        delta[:, j] = np.inf
        size[i] = ni + nj
        active[j] = False
        owner[owner == j] = i
        remaining -= 1
    return owner


def proximal_matrix(codebooks: np.ndarray, row_group: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    """Inverse-distance update weights toward each codeword from the assigned one."""
    cb = np.ascontiguousarray(codebooks, dtype=np.float64)
    rows = cb[row_group]  # (n_o, q)
    assigned = np.take_along_axis(rows, argmax, axis=1)  # (n_o, n_i)
    diff = assigned[:, :, None] - rows[:, None, :]
    sgn = np.where(diff >= 0.0, 1.0, -1.0)
    out = sgn / (1.0 + np.abs(diff))
    q = cb.shape[1]
    out -= argmax[:, :, None] == np.arange(q)
    return out
