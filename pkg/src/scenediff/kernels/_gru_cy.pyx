# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled recurrent-scan kernels (float64).

Same recurrence as the numpy fallback, with the per-step matmuls routed
through BLAS and the gate nonlinearities fused into single C loops.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, tanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _sig(double x) noexcept nogil:
    return 1.0 / (1.0 + exp(-x))


def scan_forward(double[:, :, ::1] xg, double[:, ::1] h0, double[:, ::1] u):
    cdef Py_ssize_t T = xg.shape[0]
    cdef Py_ssize_t B = xg.shape[1]
    cdef Py_ssize_t H = xg.shape[2] // 3
    hs_arr = np.empty((T, B, H), dtype=np.float64)
    zs_arr = np.empty((T, B, H), dtype=np.float64)
    rs_arr = np.empty((T, B, H), dtype=np.float64)
    ns_arr = np.empty((T, B, H), dtype=np.float64)
    gn_arr = np.empty((T, B, H), dtype=np.float64)
    gates_arr = np.empty((B, 3 * H), dtype=np.float64)
    h_arr = np.ascontiguousarray(h0).copy()

    cdef double[:, :, ::1] hs = hs_arr
    cdef double[:, :, ::1] zs = zs_arr
    cdef double[:, :, ::1] rs = rs_arr
    cdef double[:, :, ::1] ns = ns_arr
    cdef double[:, :, ::1] gns = gn_arr
    cdef double[:, ::1] gates = gates_arr
    cdef double[:, ::1] h = h_arr

    cdef int m = <int>(3 * H), n = <int>B, k = <int>H
    cdef int lda = <int>(3 * H), ldb = <int>H, ldc = <int>(3 * H)
    cdef double one = 1.0, zero = 0.0
    cdef char no = b'N'
    cdef Py_ssize_t t, b, j
    cdef double z, r, gn, nn

    with nogil:
        for t in range(T):
            # gates = h @ u   (row-major via transposed column-major gemm)
            dgemm(&no, &no, &m, &n, &k, &one, &u[0, 0], &lda,
                  &h[0, 0], &ldb, &zero, &gates[0, 0], &ldc)
            for b in range(B):
                for j in range(H):
                    z = _sig(xg[t, b, j] + gates[b, j])
                    r = _sig(xg[t, b, H + j] + gates[b, H + j])
                    gn = gates[b, 2 * H + j]
                    nn = tanh(xg[t, b, 2 * H + j] + r * gn)
                    zs[t, b, j] = z
                    rs[t, b, j] = r
                    gns[t, b, j] = gn
                    ns[t, b, j] = nn
                    h[b, j] = (1.0 - z) * h[b, j] + z * nn
                    hs[t, b, j] = h[b, j]
    return hs_arr, (hs_arr, zs_arr, rs_arr, ns_arr, gn_arr, np.asarray(h0))


def scan_backward(double[:, :, ::1] dhs, cache, double[:, ::1] u):
    hs_arr, zs_arr, rs_arr, ns_arr, gn_arr, h0_arr = cache
    cdef double[:, :, ::1] hs = hs_arr
    cdef double[:, :, ::1] zs = zs_arr
    cdef double[:, :, ::1] rs = rs_arr
    cdef double[:, :, ::1] ns = ns_arr
    cdef double[:, :, ::1] gns = gn_arr
    cdef double[:, ::1] h0 = np.ascontiguousarray(h0_arr)

    cdef Py_ssize_t T = hs.shape[0]
    cdef Py_ssize_t B = hs.shape[1]
    cdef Py_ssize_t H = hs.shape[2]

    dxg_arr = np.empty((T, B, 3 * H), dtype=np.float64)
    du_arr = np.zeros((H, 3 * H), dtype=np.float64)
    carry_arr = np.zeros((B, H), dtype=np.float64)
    dg_arr = np.empty((B, 3 * H), dtype=np.float64)

    cdef double[:, :, ::1] dxg = dxg_arr
    cdef double[:, ::1] du = du_arr
    cdef double[:, ::1] carry = carry_arr
    cdef double[:, ::1] dg = dg_arr

    cdef int m3 = <int>(3 * H), nB = <int>B, nH = <int>H, kB = <int>B, k3 = <int>(3 * H)
    cdef int ld3 = <int>(3 * H), ldH = <int>H
    cdef double one = 1.0
    cdef char no = b'N', tr = b'T'
    cdef Py_ssize_t t, b, j
    cdef double z, r, nn, gn, delta, dz, dan, daz, dr, dar
    cdef double* hprev_ptr

    with nogil:
        for t in range(T - 1, -1, -1):
            if t > 0:
                hprev_ptr = &hs[t - 1, 0, 0]
            else:
                hprev_ptr = &h0[0, 0]
            for b in range(B):
                for j in range(H):
                    z = zs[t, b, j]
                    r = rs[t, b, j]
                    nn = ns[t, b, j]
                    gn = gns[t, b, j]
                    delta = dhs[t, b, j] + carry[b, j]
                    dz = delta * (nn - hprev_ptr[b * H + j])
                    dan = delta * z * (1.0 - nn * nn)
                    daz = dz * z * (1.0 - z)
                    dr = dan * gn
                    dar = dr * r * (1.0 - r)
                    dg[b, j] = daz
                    dg[b, H + j] = dar
                    dg[b, 2 * H + j] = dan * r
                    dxg[t, b, j] = daz
                    dxg[t, b, H + j] = dar
                    dxg[t, b, 2 * H + j] = dan
                    carry[b, j] = delta * (1.0 - z)
            # du += h_prev.T @ dg
            dgemm(&no, &tr, &m3, &nH, &kB, &one, &dg[0, 0], &ld3,
                  hprev_ptr, &ldH, &one, &du[0, 0], &ld3)
            # carry += dg @ u.T
            dgemm(&tr, &no, &nH, &nB, &k3, &one, &u[0, 0], &ld3,
                  &dg[0, 0], &ld3, &one, &carry[0, 0], &ldH)
    return dxg_arr, carry_arr, du_arr
