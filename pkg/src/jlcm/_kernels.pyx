# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled hot kernels. Results match ``_fallback`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, INFINITY
from libcpp.queue cimport priority_queue
from libcpp.pair cimport pair

cnp.import_array()

ctypedef pair[double, pair[Py_ssize_t, Py_ssize_t]] HeapItem


def pack_bits(indices, int bits):
    cdef cnp.int64_t[::1] idx = np.ascontiguousarray(indices, dtype=np.int64).ravel()
    cdef Py_ssize_t n = idx.shape[0]
    if n == 0:
        return b""
    cdef Py_ssize_t nbytes = (n * bits + 7) // 8
    out = np.zeros(nbytes, dtype=np.uint8)
    cdef cnp.uint8_t[::1] o = out
    cdef Py_ssize_t t, w = 0
    cdef cnp.uint64_t acc = 0
    cdef cnp.uint64_t mask = ((<cnp.uint64_t>1) << bits) - 1
    cdef int fill = 0
    for t in range(n):
        # bits <= 16 and fill < 8 on entry, so the accumulator never overflows
        acc |= (<cnp.uint64_t>idx[t] & mask) << fill
        fill += bits
        while fill >= 8:
            o[w] = <cnp.uint8_t>(acc & 0xFF)
            w += 1
            acc >>= 8
            fill -= 8
    if fill > 0:
        o[w] = <cnp.uint8_t>(acc & 0xFF)
    return out.tobytes()


def unpack_bits(buf, int bits, Py_ssize_t count):
    out = np.zeros(count, dtype=np.int64)
    if count == 0:
        return out
    cdef const cnp.uint8_t[::1] raw = np.frombuffer(buf, dtype=np.uint8)
    cdef cnp.int64_t[::1] o = out
    cdef Py_ssize_t t, r = 0
    cdef cnp.uint64_t acc = 0
    cdef cnp.uint64_t mask = ((<cnp.uint64_t>1) << bits) - 1
    cdef int fill = 0
    for t in range(count):
        while fill < bits:
            acc |= (<cnp.uint64_t>raw[r]) << fill
            r += 1
            fill += 8
        o[t] = <cnp.int64_t>(acc & mask)
        acc >>= bits
        fill -= bits
    return out


def nearest_codeword(values, codebook):
    cdef const double[::1] v = np.ascontiguousarray(values, dtype=np.float64).ravel()
    cdef const double[::1] c = np.ascontiguousarray(codebook, dtype=np.float64)
    cdef Py_ssize_t n = v.shape[0], q = c.shape[0], t, j, best
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    cdef double d, bd
    for t in range(n):
        best = 0
        bd = fabs(v[t] - c[0])
        for j in range(1, q):
            d = fabs(v[t] - c[j])
            if d < bd:
                bd = d
                best = j
        o[t] = best
    return out


cdef inline double _cost(const double[::1] s1, const double[::1] s2,
                         Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    cdef double cnt = <double>(j - i + 1)
    cdef double a = s1[j + 1] - s1[i]
    cdef double c = (s2[j + 1] - s2[i]) - a * a / cnt
    return c if c > 0.0 else 0.0


cdef void _solve(const double[::1] s1, const double[::1] s2,
                 const double[::1] prev, double[::1] cur, cnp.int64_t[:, ::1] split,
                 Py_ssize_t level, Py_ssize_t lo, Py_ssize_t hi,
                 Py_ssize_t olo, Py_ssize_t ohi) noexcept nogil:
    cdef Py_ssize_t mid, i, b, best
    cdef double val, bv
    while lo <= hi:
        mid = (lo + hi) // 2
        b = mid if mid < ohi else ohi
        best = olo
        bv = prev[olo - 1] + _cost(s1, s2, olo, mid)
        for i in range(olo + 1, b + 1):
            val = prev[i - 1] + _cost(s1, s2, i, mid)
            if val < bv:
                bv = val
                best = i
        cur[mid] = bv
        split[level, mid] = best
        _solve(s1, s2, prev, cur, split, level, lo, mid - 1, olo, best)
        lo = mid + 1
        olo = best


def kmeans1d_dp(x, Py_ssize_t k):
    cdef const double[::1] xs = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xs.shape[0], i, level, end, start
    s1_arr = np.zeros(n + 1)
    s2_arr = np.zeros(n + 1)
    cdef double[::1] s1 = s1_arr
    cdef double[::1] s2 = s2_arr
    for i in range(n):
        s1[i + 1] = s1[i] + xs[i]
        s2[i + 1] = s2[i] + xs[i] * xs[i]
    prev_arr = np.empty(n)
    cdef double[::1] prev = prev_arr
    for i in range(n):
        prev[i] = _cost(s1, s2, 0, i)
    split_arr = np.zeros((k, n), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] split = split_arr
    cdef double[::1] cur
    for level in range(1, k):
        cur_arr = np.full(n, np.inf)
        cur = cur_arr
        _solve(s1, s2, prev, cur, split, level, level, n - 1, level, n - 1)
        prev_arr = cur_arr
        prev = prev_arr
    bounds = np.empty(k + 1, dtype=np.int64)
    bounds[k] = n
    end = n - 1
    for level in range(k - 1, 0, -1):
        start = split[level, end]
        bounds[level] = start
        end = start - 1
    bounds[0] = 0
    return bounds


cdef inline double _ward_cost(double[::1] sums, double[::1] counts,
                              Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    cdef double d = sums[a] / counts[a] - sums[b] / counts[b]
    return (counts[a] * counts[b] / (counts[a] + counts[b])) * d * d


def ward_1d(x, Py_ssize_t k):
    cdef const double[::1] xs = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xs.shape[0], a, b, p, st, remaining
    sums_arr = np.array(xs, dtype=np.float64)
    counts_arr = np.ones(n)
    nxt_arr = np.arange(1, n + 1, dtype=np.intp)
    prv_arr = np.arange(-1, n - 1, dtype=np.intp)
    stamp_arr = np.zeros(n, dtype=np.intp)
    alive_arr = np.ones(n, dtype=np.uint8)
    cdef double[::1] sums = sums_arr
    cdef double[::1] counts = counts_arr
    cdef Py_ssize_t[::1] nxt = nxt_arr
    cdef Py_ssize_t[::1] prv = prv_arr
    cdef Py_ssize_t[::1] stamp = stamp_arr
    cdef cnp.uint8_t[::1] alive = alive_arr
    # max-heap on (-cost, -left) pops the cheapest, leftmost pair; stale stamps are skipped
    cdef priority_queue[HeapItem] heap
    cdef HeapItem item
    for a in range(n - 1):
        heap.push(HeapItem(-_ward_cost(sums, counts, a, a + 1),
                           pair[Py_ssize_t, Py_ssize_t](-a, 0)))
    remaining = n
    while remaining > k:
        item = heap.top()
        heap.pop()
        a = -item.second.first
        st = item.second.second
        if not alive[a] or st != stamp[a]:
            continue
        b = nxt[a]
        sums[a] += sums[b]
        counts[a] += counts[b]
        alive[b] = 0
        nxt[a] = nxt[b]
        if nxt[a] < n:
            prv[nxt[a]] = a
        remaining -= 1
        stamp[a] += 1
        if nxt[a] < n:
            heap.push(HeapItem(-_ward_cost(sums, counts, a, nxt[a]),
                               pair[Py_ssize_t, Py_ssize_t](-a, stamp[a])))
        p = prv[a]
        if p >= 0:
            stamp[p] += 1
            heap.push(HeapItem(-_ward_cost(sums, counts, p, a),
                               pair[Py_ssize_t, Py_ssize_t](-p, stamp[p])))
    starts = [i for i in range(n) if alive[i]]
    return np.array(starts + [n], dtype=np.int64)


def ward_general(cost, Py_ssize_t k):
    delta_arr = np.array(cost, dtype=np.float64, copy=True)
    cdef double[:, ::1] delta = delta_arr
    cdef Py_ssize_t n = delta.shape[0], i, j, m, bi = 0, bj = 0, remaining
    size_arr = np.ones(n)
    cdef double[::1] size = size_arr
    owner_arr = np.arange(n, dtype=np.int64)
    cdef cnp.int64_t[::1] owner = owner_arr
    active_arr = np.ones(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] active = active_arr
    cdef double best, dij, ni, nj, nm, upd
    for i in range(n):
        delta[i, i] = INFINITY
    remaining = n
    while remaining > k:
        best = INFINITY
        for i in range(n):
            if not active[i]:
                continue
            for j in range(i + 1, n):
                if delta[i, j] < best:
                    best = delta[i, j]
                    bi = i
                    bj = j
        i = bi
        j = bj
        dij = delta[i, j]
        ni = size[i]
        nj = size[j]
        for m in range(n):
            if not active[m] or m == i or m == j:
                upd = INFINITY
            else:
                nm = size[m]
                upd = ((ni + nm) * delta[i, m] + (nj + nm) * delta[j, m] - nm * dij) / (ni + nj + nm)
            delta[i, m] = upd
            delta[m, i] = upd
        for m in range(n):
            delta[j, m] = INFINITY
            delta[m, j] = INFINITY
        size[i] = ni + nj
        active[j] = 0
        for m in range(n):
            if owner[m] == j:
                owner[m] = i
        remaining -= 1
    return owner_arr


def proximal_matrix(codebooks, row_group, argmax):
    cdef const double[:, ::1] cb = np.ascontiguousarray(codebooks, dtype=np.float64)
    cdef const cnp.int64_t[::1] grp = np.ascontiguousarray(row_group, dtype=np.int64)
    cdef const cnp.int64_t[:, ::1] am = np.ascontiguousarray(argmax, dtype=np.int64)
    cdef Py_ssize_t n_o = am.shape[0], n_i = am.shape[1], q = cb.shape[1]
    cdef Py_ssize_t r, c, j, g, a
    out = np.empty((n_o, n_i, q), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef double ca, diff, sgn
    for r in range(n_o):
        g = grp[r]
        for c in range(n_i):
            a = am[r, c]
            ca = cb[g, a]
            for j in range(q):
                diff = ca - cb[g, j]
                sgn = 1.0 if diff >= 0.0 else -1.0
                o[r, c, j] = sgn / (1.0 + fabs(diff))
            o[r, c, a] -= 1.0
    return out
