# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LSTM recurrence. Same contract as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _sig(double x) nogil:
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    cdef double e = exp(x)
    return e / (1.0 + e)


cdef inline double _tanh(double x) nogil:
    # exp-based form is markedly faster than libm tanh here
    if x >= 0:
        return 2.0 / (1.0 + exp(-2.0 * x)) - 1.0
    return 1.0 - 2.0 / (1.0 + exp(2.0 * x))


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * np.asarray(x)) + 1.0)


def lstm_forward(double[:, :, ::1] xp, double[:, ::1] w_hh):
    cdef int B = xp.shape[0], T = xp.shape[1], H4 = xp.shape[2]
    cdef int H = H4 // 4
    h_arr = np.empty((B, T, H))
    c_arr = np.empty((B, T, H))
    g_arr = np.empty((B, T, H4))
    z_arr = np.empty((B, H4))
    cdef double[:, :, ::1] h = h_arr
    cdef double[:, :, ::1] c = c_arr
    cdef double[:, :, ::1] gates = g_arr
    cdef double[:, ::1] z = z_arr
    cdef int b, t, k
    cdef double one = 1.0
    cdef int ldh = T * H
    cdef double iv, fv, gv, ov, cp, cv
    with nogil:
        for t in range(T):
            for b in range(B):
                for k in range(H4):
                    z[b, k] = xp[b, t, k]
            if t > 0:
                # z^T (4H x B) += W^T (4H x H) . h_prev^T (H x B), column-major view
                dgemm(b"N", b"N", &H4, &B, &H, &one, &w_hh[0, 0], &H4,
                      &h[0, t - 1, 0], &ldh, &one, &z[0, 0], &H4)
            for b in range(B):
                for k in range(H):
                    iv = _sig(z[b, k])
                    fv = _sig(z[b, H + k])
                    gv = _tanh(z[b, 2 * H + k])
                    ov = _sig(z[b, 3 * H + k])
                    cp = c[b, t - 1, k] if t > 0 else 0.0
                    cv = fv * cp + iv * gv
                    gates[b, t, k] = iv
                    gates[b, t, H + k] = fv
                    gates[b, t, 2 * H + k] = gv
                    gates[b, t, 3 * H + k] = ov
                    c[b, t, k] = cv
                    h[b, t, k] = ov * _tanh(cv)
    return h_arr, c_arr, g_arr


def lstm_backward(double[:, :, ::1] dh, double[:, :, ::1] gates,
                  double[:, :, ::1] c, double[:, ::1] w_hh):
    cdef int B = dh.shape[0], T = dh.shape[1], H = dh.shape[2]
    cdef int H4 = 4 * H
    dz_arr = np.empty((B, T, H4))
    dhn_arr = np.zeros((B, H))
    dcn_arr = np.zeros((B, H))
    cdef double[:, :, ::1] dz = dz_arr
    cdef double[:, ::1] dh_next = dhn_arr
    cdef double[:, ::1] dc_next = dcn_arr
    cdef int b, t, k
    cdef double one = 1.0, zero = 0.0
    cdef int ldz = T * H4
    cdef double iv, fv, gv, ov, cp, tc, dht, dc
    with nogil:
        for t in range(T - 1, -1, -1):
            for b in range(B):
                for k in range(H):
                    iv = gates[b, t, k]
                    fv = gates[b, t, H + k]
                    gv = gates[b, t, 2 * H + k]
                    ov = gates[b, t, 3 * H + k]
                    cp = c[b, t - 1, k] if t > 0 else 0.0
                    tc = _tanh(c[b, t, k])
                    dht = dh[b, t, k] + dh_next[b, k]
                    dc = dc_next[b, k] + dht * ov * (1.0 - tc * tc)
                    dz[b, t, k] = dc * gv * iv * (1.0 - iv)
                    dz[b, t, H + k] = dc * cp * fv * (1.0 - fv)
                    dz[b, t, 2 * H + k] = dc * iv * (1.0 - gv * gv)
                    dz[b, t, 3 * H + k] = dht * tc * ov * (1.0 - ov)
                    dc_next[b, k] = dc * fv
            # dh_next^T (H x B) = W (H x 4H) . dz_t^T (4H x B), column-major view
            dgemm(b"T", b"N", &H, &B, &H4, &one, &w_hh[0, 0], &H4,
                  &dz[0, t, 0], &ldz, &zero, &dh_next[0, 0], &H)
    return dz_arr
