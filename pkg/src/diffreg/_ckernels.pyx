# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``; same signatures."""
import numpy as np

from libc.math cimport exp, log, sqrt, INFINITY


def edge_max(node_term, nbr_term, nbr_idx, double slope):
    cdef const double[:, ::1] a = np.ascontiguousarray(node_term, dtype=np.float64)
    cdef const double[:, ::1] b = np.ascontiguousarray(nbr_term, dtype=np.float64)
    cdef const long long[:, ::1] idx = np.ascontiguousarray(nbr_idx, dtype=np.int64)
    cdef Py_ssize_t n = a.shape[0], h = a.shape[1], k = idx.shape[1]
    cdef Py_ssize_t i, j, c
    cdef double best, v
    if k == 0:
        raise ValueError("every node needs at least one neighbor")
    out = np.empty((n, h), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double* orow
    cdef const double* brow
    with nogil:
        for i in range(n):
            orow = &o[i, 0]
            brow = &b[idx[i, 0], 0]
            for c in range(h):
                orow[c] = brow[c]
            for j in range(1, k):
                brow = &b[idx[i, j], 0]
                for c in range(h):
                    # branch-free form lets the compiler vectorize the running max
                    orow[c] = brow[c] if brow[c] > orow[c] else orow[c]
            for c in range(h):
                v = a[i, c] + orow[c]
                if v <= 0 and slope != 1.0:
                    v = slope * v
                orow[c] = v
    return out


def count_inliers(R, t, src, dst, double radius):
    cdef const double[:, :, ::1] rot = np.ascontiguousarray(R, dtype=np.float64)
    cdef const double[:, ::1] tr = np.ascontiguousarray(t, dtype=np.float64)
    cdef const double[:, ::1] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef const double[:, ::1] d = np.ascontiguousarray(dst, dtype=np.float64)
    cdef Py_ssize_t nh = rot.shape[0], m = s.shape[0], hh, l
    cdef double r2 = radius * radius, x, y, z, dx, dy, dz
    counts = np.zeros(nh, dtype=np.int64)
    cdef long long[::1] cnt = counts
    cdef long long c
    with nogil:
        for hh in range(nh):
            c = 0
            for l in range(m):
                x = s[l, 0]
                y = s[l, 1]
                z = s[l, 2]
                dx = rot[hh, 0, 0] * x + rot[hh, 0, 1] * y + rot[hh, 0, 2] * z + tr[hh, 0] - d[l, 0]
                dy = rot[hh, 1, 0] * x + rot[hh, 1, 1] * y + rot[hh, 1, 2] * z + tr[hh, 1] - d[l, 1]
                dz = rot[hh, 2, 0] * x + rot[hh, 2, 1] * y + rot[hh, 2, 2] * z + tr[hh, 2] - d[l, 2]
                if dx * dx + dy * dy + dz * dz < r2:
                    c += 1
            cnt[hh] = c
    return counts


cdef inline double _finite_or_zero(double v) nogil:
    if v == INFINITY or v == -INFINITY or v != v:
        return 0.0
    return v


def log_sinkhorn(log_scores, log_mu, log_nu, int iterations):
    cdef const double[:, ::1] Z = np.ascontiguousarray(log_scores, dtype=np.float64)
    cdef const double[::1] lmu = np.ascontiguousarray(log_mu, dtype=np.float64)
    cdef const double[::1] lnu = np.ascontiguousarray(log_nu, dtype=np.float64)
    cdef Py_ssize_t m = Z.shape[0], n = Z.shape[1], i, j
    cdef int it
    cdef double mx, acc, v
    u_arr = np.zeros(m)
    v_arr = np.zeros(n)
    cdef double[::1] u = u_arr
    cdef double[::1] w = v_arr
    with nogil:
        for it in range(iterations):
            for i in range(m):
                mx = -INFINITY
                for j in range(n):
                    v = Z[i, j] + w[j]
                    if v > mx:
                        mx = v
                mx = _finite_or_zero(mx)
                acc = 0.0
                for j in range(n):
                    acc = acc + exp(Z[i, j] + w[j] - mx)
                u[i] = lmu[i] - (mx + log(acc))
            for j in range(n):
                mx = -INFINITY
                for i in range(m):
                    v = Z[i, j] + u[i]
                    if v > mx:
                        mx = v
                mx = _finite_or_zero(mx)
                acc = 0.0
                for i in range(m):
                    acc = acc + exp(Z[i, j] + u[i] - mx)
                w[j] = lnu[j] - (mx + log(acc))
    out = np.asarray(Z) + u_arr[:, None] + v_arr[None, :]
    return out


def neighbor_attention(z, nbr_idx):
    cdef const double[:, ::1] x = np.ascontiguousarray(z, dtype=np.float64)
    cdef const long long[:, ::1] idx = np.ascontiguousarray(nbr_idx, dtype=np.int64)
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], k = idx.shape[1]
    cdef Py_ssize_t i, j, c
    cdef double inv = 1.0 / sqrt(<double>d), mx, tot, s, diff
    out = np.zeros((n, d), dtype=np.float64)
    logit_buf = np.empty(max(k, 1), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[::1] lg = logit_buf
    cdef const double* xi
    cdef const double* xj
    with nogil:
        for i in range(n):
            xi = &x[i, 0]
            mx = -INFINITY
            for j in range(k):
                xj = &x[idx[i, j], 0]
                s = 0.0
                for c in range(d):
                    diff = xj[c] - xi[c]
                    s = s + diff * diff
                lg[j] = -s * inv
                if lg[j] > mx:
                    mx = lg[j]
            tot = 0.0
            for j in range(k):
                lg[j] = exp(lg[j] - mx)
                tot = tot + lg[j]
            for j in range(k):
                xj = &x[idx[i, j], 0]
                s = lg[j] / tot
                for c in range(d):
                    o[i, c] += s * (xj[c] - xi[c])
    return out
