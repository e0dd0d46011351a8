# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled selective-scan recurrence.

Mirrors kernels.scan_numpy element for element; the two backends agree to
floating-point roundoff (summation order differs), not bitwise. float64 only;
the dispatcher falls back to numpy for anything else.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def scan_forward(double[:, :, ::1] x, double[:, :, ::1] delta,
                 double[:, ::1] A, double[:, :, ::1] B, double[:, :, ::1] C):
    cdef Py_ssize_t N = x.shape[0], T = x.shape[1], D = x.shape[2], S = A.shape[1]
    y_arr = np.empty((N, T, D), dtype=np.float64)
    hs_arr = np.empty((N, T, D, S), dtype=np.float64)
    cdef double[:, :, ::1] y = y_arr
    cdef double[:, :, :, ::1] hs = hs_arr
    cdef Py_ssize_t n, t, d, s
    cdef double dval, xval, h, hprev, acc
    for n in range(N):
        for t in range(T):
            for d in range(D):
                dval = delta[n, t, d]
                xval = x[n, t, d]
                acc = 0.0
                for s in range(S):
                    hprev = hs[n, t - 1, d, s] if t > 0 else 0.0
                    h = exp(dval * A[d, s]) * hprev + dval * B[n, t, s] * xval
                    hs[n, t, d, s] = h
                    acc += h * C[n, t, s]
                y[n, t, d] = acc
    return y_arr, hs_arr


def scan_backward(double[:, :, ::1] x, double[:, :, ::1] delta,
                  double[:, ::1] A, double[:, :, ::1] B, double[:, :, ::1] C,
                  double[:, :, :, ::1] hs, double[:, :, ::1] gy):
    cdef Py_ssize_t N = x.shape[0], T = x.shape[1], D = x.shape[2], S = A.shape[1]
    gx_arr = np.zeros((N, T, D), dtype=np.float64)
    gdelta_arr = np.zeros((N, T, D), dtype=np.float64)
    gA_arr = np.zeros((D, S), dtype=np.float64)
    gB_arr = np.zeros((N, T, S), dtype=np.float64)
    gC_arr = np.zeros((N, T, S), dtype=np.float64)
    gh_arr = np.zeros((D, S), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, :, ::1] gdelta = gdelta_arr
    cdef double[:, ::1] gA = gA_arr
    cdef double[:, :, ::1] gB = gB_arr
    cdef double[:, :, ::1] gC = gC_arr
    cdef double[:, ::1] gh = gh_arr
    cdef Py_ssize_t n, t, d, s
    cdef double gyv, dval, xval, ghv, hprev, dec, gdec, gd_acc, gx_acc
    for n in range(N):
        for d in range(D):
            for s in range(S):
                gh[d, s] = 0.0
        for t in range(T - 1, -1, -1):
            for d in range(D):
                gyv = gy[n, t, d]
                dval = delta[n, t, d]
                xval = x[n, t, d]
                gd_acc = 0.0
                gx_acc = 0.0
                for s in range(S):
                    gC[n, t, s] += gyv * hs[n, t, d, s]
                    ghv = gh[d, s] + gyv * C[n, t, s]
                    hprev = hs[n, t - 1, d, s] if t > 0 else 0.0
                    dec = exp(dval * A[d, s])
                    gdec = ghv * hprev
                    gd_acc += gdec * dec * A[d, s] + ghv * B[n, t, s] * xval
                    gA[d, s] += gdec * dec * dval
                    gB[n, t, s] += ghv * dval * xval
                    gx_acc += ghv * B[n, t, s]
                    gh[d, s] = ghv * dec
                gdelta[n, t, d] = gd_acc
                gx[n, t, d] = gx_acc * dval
    return gx_arr, gdelta_arr, gA_arr, gB_arr, gC_arr
