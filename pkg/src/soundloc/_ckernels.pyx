# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``; identical semantics."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef double TIE_EPS = 1e-12


def assign_nearest(X, centers):
    cdef const double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] c = np.ascontiguousarray(centers, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], k = c.shape[0], d = x.shape[1]
    labels_arr = np.empty(n, dtype=np.int64)
    dist_arr = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] labels = labels_arr
    cdef double[::1] dist = dist_arr
    cdef Py_ssize_t i, j, t
    cdef double best, acc, diff
    cdef cnp.int64_t arg
    with nogil:
        for i in range(n):
            best = 1e300
            arg = 0
            for j in range(k):
                acc = 0.0
                for t in range(d):
                    diff = x[i, t] - c[j, t]
                    acc = acc + diff * diff
                if acc < best:
                    best = acc
                    arg = j
            labels[i] = arg
            dist[i] = best
    return labels_arr, dist_arr


def best_surjective_map(fractions):
    cdef const double[:, ::1] fr = np.ascontiguousarray(fractions, dtype=np.float64)
    cdef Py_ssize_t K = fr.shape[0], n_cat = fr.shape[1]
    digits_arr = np.zeros(K, dtype=np.int64)
    best_arr = np.zeros(K, dtype=np.int64)
    hits_arr = np.zeros(n_cat, dtype=np.int64)
    cdef cnp.int64_t[::1] digits = digits_arr
    cdef cnp.int64_t[::1] best_map = best_arr
    cdef cnp.int64_t[::1] hits = hits_arr
    cdef Py_ssize_t k, pos
    cdef cnp.int64_t covered = 0
    cdef double purity, best_purity = -1e300
    cdef bint found = False, done = False
    hits[0] = K
    covered = 1
    with nogil:
        while not done:
            if covered == n_cat:
                purity = 0.0
                for k in range(K):
                    purity = purity + fr[k, digits[k]]
                if (not found) or purity > best_purity + TIE_EPS:
                    best_purity = purity
                    found = True
                    for k in range(K):
                        best_map[k] = digits[k]
            # mixed-radix increment, least significant digit = last cluster
            pos = K - 1
            while True:
                if pos < 0:
                    done = True
                    break
                hits[digits[pos]] -= 1
                if hits[digits[pos]] == 0:
                    covered -= 1
                digits[pos] += 1
                if digits[pos] == n_cat:
                    digits[pos] = 0
                    hits[0] += 1
                    if hits[0] == 1:
                        covered += 1
                    pos -= 1
                else:
                    hits[digits[pos]] += 1
                    if hits[digits[pos]] == 1:
                        covered += 1
                    break
    if not found:
        raise ValueError("no surjective map exists (fewer clusters than categories)")
    return best_arr, float(best_purity)
