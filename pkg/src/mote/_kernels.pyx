# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.

Every reduction runs left to right over the contracted index and each output
row depends only on its own input row, so a batch evaluation is bit-identical
to evaluating its rows one at a time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

BACKEND = "compiled"


cdef inline void axpy(double* y, const double* p, double x, Py_ssize_t n) noexcept nogil:
    # y[j] += x * p[j]; one product per output, so per-output order is unchanged
    cdef Py_ssize_t j
    for j in range(n):
        y[j] = y[j] + x * p[j]


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1], p = b.shape[1]
    if b.shape[0] != m:
        raise ValueError(f"matmul: shapes ({n},{m}) and ({b.shape[0]},{p}) do not align")
    out_arr = np.zeros((n, p), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    with nogil:
        for i in range(n):
            for k in range(m):
                axpy(&out[i, 0], &b[k, 0], a[i, k], p)
    return out_arr


def adapter_forward(const double[:, ::1] h_out, const double[:, ::1] h_msa,
                    const double[:, ::1] w_down, const double[:, ::1] w_up,
                    bint parallel):
    # loops are ordered so the innermost index runs over independent outputs;
    # each output still accumulates its terms left to right
    cdef Py_ssize_t n = h_out.shape[0], d = h_out.shape[1], r = w_down.shape[1]
    out_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] hidden = np.empty(r, dtype=np.float64)
    cdef double[::1] up = np.empty(d, dtype=np.float64)
    cdef const double[:, ::1] src = h_msa if parallel else h_out
    cdef Py_ssize_t i, j, k
    cdef double x
    with nogil:
        for i in range(n):
            for k in range(r):
                hidden[k] = 0.0
            for j in range(d):
                axpy(&hidden[0], &w_down[j, 0], src[i, j], r)
            for j in range(d):
                up[j] = 0.0
            for k in range(r):
                x = hidden[k] if hidden[k] > 0.0 else 0.0
                axpy(&up[0], &w_up[k, 0], x, d)
            if parallel:
                for j in range(d):
                    out[i, j] = h_out[i, j] + up[j] + h_msa[i, j]
            else:
                for j in range(d):
                    out[i, j] = h_out[i, j] + up[j]
    return out_arr


def prototype_norms(const double[:, ::1] protos, double eps=1e-12):
    cdef Py_ssize_t c = protos.shape[0], d = protos.shape[1], j, k
    out_arr = np.empty(c, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double acc
    with nogil:
        for j in range(c):
            acc = 0.0
            for k in range(d):
                acc = acc + protos[j, k] * protos[j, k]
            acc = sqrt(acc)
            out[j] = acc if acc > eps else eps
    return out_arr


DEF ROWS = 4


def cosine_prepared(const double[:, ::1] feats, const double[:, ::1] protos_t,
                    const double[::1] pnorm, double eps=1e-12):
    """Cosine logits against prototypes given transposed, (d, c), with their norms.

    Rows are processed in tiles so each prototype column is read once per tile;
    every output still sums its d products left to right.
    """
    cdef Py_ssize_t n = feats.shape[0], d = feats.shape[1], c = protos_t.shape[1]
    if protos_t.shape[0] != d:
        raise ValueError("cosine_sims: feature and prototype dims differ")
    out_arr = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] acc = np.empty((ROWS, c), dtype=np.float64)
    cdef double[::1] fn = np.empty(ROWS, dtype=np.float64)
    cdef Py_ssize_t i0, t, rows, j, k
    cdef double x, sq
    with nogil:
        i0 = 0
        while i0 < n:
            rows = n - i0 if n - i0 < ROWS else ROWS
            for t in range(rows):
                sq = 0.0
                for k in range(d):
                    sq = sq + feats[i0 + t, k] * feats[i0 + t, k]
                sq = sqrt(sq)
                fn[t] = sq if sq > eps else eps
                for j in range(c):
                    acc[t, j] = 0.0
            for k in range(d):
                for t in range(rows):
                    axpy(&acc[t, 0], &protos_t[k, 0], feats[i0 + t, k], c)
            for t in range(rows):
                for j in range(c):
                    out[i0 + t, j] = acc[t, j] / (fn[t] * pnorm[j])
            i0 += rows
    return out_arr


def cosine_sims(const double[:, ::1] feats, const double[:, ::1] protos, double eps=1e-12):
    if protos.shape[1] != feats.shape[1]:
        raise ValueError("cosine_sims: feature and prototype dims differ")
    pt = np.ascontiguousarray(np.asarray(protos).T)
    return cosine_prepared(feats, pt, prototype_norms(protos, eps), eps)


def top2(const double[:, ::1] sims):
    cdef Py_ssize_t n = sims.shape[0], c = sims.shape[1]
    idx_arr = np.empty(n, dtype=np.int64)
    z1_arr = np.empty(n, dtype=np.float64)
    z2_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] idx = idx_arr
    cdef double[::1] z1 = z1_arr, z2 = z2_arr
    cdef Py_ssize_t i, j, best
    cdef double b1, b2, v
    with nogil:
        for i in range(n):
            best = 0
            b1 = sims[i, 0]
            b2 = 0.0
            if c > 1:
                b2 = -1e300
            for j in range(1, c):
                v = sims[i, j]
                if v > b1:
                    b2 = b1
                    b1 = v
                    best = j
                elif v > b2:
                    b2 = v
            idx[i] = best
            z1[i] = b1
            z2[i] = b2
    return idx_arr, z1_arr, z2_arr
