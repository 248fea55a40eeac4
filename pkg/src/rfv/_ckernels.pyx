# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled scalar-loop kernels. Signatures mirror rfv._pykernels."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def rle_encode(const unsigned char[::1] flat):
    cdef Py_ssize_t n = flat.shape[0]
    cdef Py_ssize_t i, start = 0, nruns = 1
    cdef unsigned char cur = 0, v
    cdef const unsigned char* p = &flat[0] if n else NULL
    # pass 1: count value changes (the first run is zeros, possibly empty);
    # no loop-carried state so the compiler can vectorize it
    if n:
        nruns += p[0] != 0
    for i in range(1, n):
        nruns += (p[i] != 0) ^ (p[i - 1] != 0)
    out = np.empty(nruns, dtype=np.int64)
    cdef long long[::1] runs = out
    nruns = 0
    for i in range(n):
        v = p[i] != 0
        if v != cur:
            runs[nruns] = i - start
            nruns += 1
            start = i
            cur = v
    runs[nruns] = n - start
    return out


def rle_decode(const long long[::1] runs, Py_ssize_t n):
    out = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] o = out
    cdef Py_ssize_t r, j, pos = 0
    cdef long long length
    for r in range(runs.shape[0]):
        length = runs[r]
        if r & 1:
            for j in range(pos, pos + length):
                o[j] = 1
        pos += length
    return out


cdef Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t x) nogil:
    cdef Py_ssize_t root = x, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


def label_components(const unsigned char[:, ::1] bitmap):
    """4-connected labelling; labels 1..n numbered by raster order of first pixel."""
    cdef Py_ssize_t h = bitmap.shape[0], w = bitmap.shape[1]
    cdef Py_ssize_t y, x, i, a, b, ra, rb, n = 0
    parent_arr = np.arange(h * w, dtype=np.intp)
    cdef Py_ssize_t[::1] parent = parent_arr
    for y in range(h):
        for x in range(w):
            if not bitmap[y, x]:
                continue
            i = y * w + x
            if x > 0 and bitmap[y, x - 1]:
                ra = _find(parent, i)
                rb = _find(parent, i - 1)
                if ra != rb:
                    if ra < rb:
                        parent[rb] = ra
                    else:
                        parent[ra] = rb
            if y > 0 and bitmap[y - 1, x]:
                ra = _find(parent, i)
                rb = _find(parent, i - w)
                if ra != rb:
                    if ra < rb:
                        parent[rb] = ra
                    else:
                        parent[ra] = rb
    labels_arr = np.zeros((h, w), dtype=np.int32)
    cdef int[:, ::1] labels = labels_arr
    remap_arr = np.zeros(h * w, dtype=np.int32)
    cdef int[::1] remap = remap_arr
    for y in range(h):
        for x in range(w):
            if not bitmap[y, x]:
                continue
            ra = _find(parent, y * w + x)
            if remap[ra] == 0:
                n += 1
                remap[ra] = n
            labels[y, x] = remap[ra]
    return labels_arr, n


def mips_scan(const double[:, ::1] mat, const double[::1] norms,
              const long long[::1] tie_rank, const double[::1] q,
              double qnorm, Py_ssize_t k, bint prune):
    """Exact top-k over rows pre-sorted by descending norm.

    Returns (row positions, scores, rows visited); order is score desc, tie_rank asc.
    """
    cdef Py_ssize_t n = mat.shape[0], d = mat.shape[1]
    cdef Py_ssize_t i, j, cnt = 0, visited = 0, pos
    cdef double s, bound
    if k > n:
        k = n
    best_idx_arr = np.empty(k, dtype=np.int64)
    best_score_arr = np.empty(k, dtype=np.float64)
    cdef long long[::1] bi = best_idx_arr
    cdef double[::1] bs = best_score_arr
    for i in range(n):
        if prune and cnt == k:
            bound = qnorm * norms[i]
            bound = bound + bound * 1e-9 + 1e-300
            if bound < bs[k - 1]:
                break
        visited += 1
        s = 0.0
        for j in range(d):
            s += mat[i, j] * q[j]
        if cnt == k:
            if s < bs[k - 1] or (s == bs[k - 1] and tie_rank[i] > tie_rank[bi[k - 1]]):
                continue
            pos = k - 1
        else:
            pos = cnt
            cnt += 1
        while pos > 0 and (bs[pos - 1] < s or (bs[pos - 1] == s and tie_rank[bi[pos - 1]] > tie_rank[i])):
            bs[pos] = bs[pos - 1]
            bi[pos] = bi[pos - 1]
            pos -= 1
        bs[pos] = s
        bi[pos] = i
    return best_idx_arr[:cnt].copy(), best_score_arr[:cnt].copy(), visited
