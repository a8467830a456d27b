# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled temporal-convolution kernels (hot path of crafting loops)."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def temporal_conv_forward(double[:, :, ::1] x, double[:, ::1] w, double[::1] b):
    """Valid cross-correlation along time; mirrors _numpy.temporal_conv_forward."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], t = x.shape[2]
    cdef Py_ssize_t k = w.shape[0], l = w.shape[1]
    cdef Py_ssize_t t1 = t - l + 1
    out = np.empty((n, k, c, t1), dtype=np.float64)
    cdef double[:, :, :, ::1] u = out
    cdef Py_ssize_t i, j, ch, s, q
    cdef double acc
    with nogil:
        for i in range(n):
            for j in range(k):
                for ch in range(c):
                    for s in range(t1):
                        acc = b[j]
                        for q in range(l):
                            acc += x[i, ch, s + q] * w[j, q]
                        u[i, j, ch, s] = acc
    return out


def temporal_conv_backward_input(double[:, ::1] w, double[:, :, :, ::1] du, Py_ssize_t t):
    """Adjoint of the forward correlation with respect to the input."""
    cdef Py_ssize_t n = du.shape[0], k = du.shape[1], c = du.shape[2], t1 = du.shape[3]
    cdef Py_ssize_t l = w.shape[1]
    out = np.zeros((n, c, t), dtype=np.float64)
    cdef double[:, :, ::1] dx = out
    cdef Py_ssize_t i, j, ch, s, q
    cdef double g
    with nogil:
        for i in range(n):
            for j in range(k):
                for ch in range(c):
                    for s in range(t1):
                        g = du[i, j, ch, s]
                        for q in range(l):
                            dx[i, ch, s + q] += w[j, q] * g
    return out


def temporal_conv_backward_weights(double[:, :, ::1] x, double[:, :, :, ::1] du):
    """Gradients of the filter weights and biases."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], t = x.shape[2]
    cdef Py_ssize_t k = du.shape[1], t1 = du.shape[3]
    cdef Py_ssize_t l = t - t1 + 1
    dw_arr = np.zeros((k, l), dtype=np.float64)
    db_arr = np.zeros(k, dtype=np.float64)
    cdef double[:, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef Py_ssize_t i, j, ch, s, q
    cdef double g
    with nogil:
        for i in range(n):
            for j in range(k):
                for ch in range(c):
                    for s in range(t1):
                        g = du[i, j, ch, s]
                        db[j] += g
                        for q in range(l):
                            dw[j, q] += x[i, ch, s + q] * g
    return dw_arr, db_arr
