# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled ball-tree query kernels (see _kernels_py for the reference version)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

ctypedef cnp.float64_t f64
ctypedef cnp.int64_t i64


cdef inline double _dist2(const f64[:, ::1] a, Py_ssize_t i, const f64[::1] q) noexcept nogil:
    cdef double s = 0.0, d
    cdef Py_ssize_t k
    for k in range(q.shape[0]):
        d = a[i, k] - q[k]
        s += d * d
    return s


def radius_count(const f64[:, ::1] data, const i64[::1] idx, const i64[::1] start,
                 const i64[::1] end, const f64[:, ::1] center, const f64[::1] radius,
                 const i64[::1] left, const i64[::1] right, const i64[::1] node_treated,
                 const i64[::1] labels, const f64[:, ::1] queries, double eps, double slack):
    cdef Py_ssize_t nq = queries.shape[0]
    cdef Py_ssize_t n_nodes = radius.shape[0]
    treated_arr = np.zeros(nq, dtype=np.int64)
    total_arr = np.zeros(nq, dtype=np.int64)
    cdef i64[::1] treated = treated_arr
    cdef i64[::1] total = total_arr
    cdef i64[::1] stack = np.empty(n_nodes + 1, dtype=np.int64)
    cdef Py_ssize_t qi, top, j, p
    cdef i64 node, nt, nn
    cdef double dist, eps2 = eps * eps
    with nogil:
        for qi in range(nq):
            nt = 0
            nn = 0
            top = 0
            stack[0] = 0
            top = 1
            while top > 0:
                top -= 1
                node = stack[top]
                dist = sqrt(_dist2(center, node, queries[qi]))
                if dist - radius[node] > eps + slack:
                    continue
                if dist + radius[node] < eps - slack:
                    nn += end[node] - start[node]
                    nt += node_treated[node]
                    continue
                if left[node] < 0:
                    for j in range(start[node], end[node]):
                        p = idx[j]
                        if _dist2(data, p, queries[qi]) <= eps2:
                            nn += 1
                            nt += labels[p]
                    continue
                stack[top] = right[node]
                stack[top + 1] = left[node]
                top += 2
            treated[qi] = nt
            total[qi] = nn
    return treated_arr, total_arr


def query_radius(const f64[:, ::1] data, const i64[::1] idx, const i64[::1] start,
                 const i64[::1] end, const f64[:, ::1] center, const f64[::1] radius,
                 const i64[::1] left, const i64[::1] right, const f64[::1] q,
                 double eps, double slack):
    cdef Py_ssize_t n_nodes = radius.shape[0]
    cdef i64[::1] stack = np.empty(n_nodes + 1, dtype=np.int64)
    out_arr = np.empty(data.shape[0], dtype=np.int64)
    cdef i64[::1] out = out_arr
    cdef Py_ssize_t top = 1, n_found = 0, j, p
    cdef i64 node
    cdef double dist, eps2 = eps * eps
    stack[0] = 0
    with nogil:
        while top > 0:
            top -= 1
            node = stack[top]
            dist = sqrt(_dist2(center, node, q))
            if dist - radius[node] > eps + slack:
                continue
            if left[node] < 0:
                for j in range(start[node], end[node]):
                    p = idx[j]
                    if _dist2(data, p, q) <= eps2:
                        out[n_found] = p
                        n_found += 1
                continue
            stack[top] = right[node]
            stack[top + 1] = left[node]
            top += 2
    return np.sort(out_arr[:n_found])
