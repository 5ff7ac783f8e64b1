# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: fused Euler-Maruyama stepping and p-Laplace drift."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, pow, sqrt, isfinite, INFINITY, NAN

cnp.import_array()

cdef enum:
    NOISE_ADDITIVE = 1
    NOISE_MULTIPLICATIVE = 2


def plaplace_dual(const double[:, ::1] U, const double[:, ::1] derivs, const double[::1] weights,
                  double alpha):
    cdef Py_ssize_t P = U.shape[0], m = U.shape[1], Q = derivs.shape[1]
    cdef Py_ssize_t p, j, q
    cdef double u, acc, z
    cdef double e = alpha - 2.0
    cdef int mode = 0 if e == 0.0 else (1 if e == 1.0 else (2 if e == 2.0 else 3))
    out_arr = np.empty((P, m))
    zbuf_arr = np.empty(Q)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] zb = zbuf_arr
    with nogil:
        for p in range(P):
            for q in range(Q):
                zb[q] = 0.0
            for j in range(m):
                u = U[p, j]
                for q in range(Q):
                    zb[q] += u * derivs[j, q]
            for q in range(Q):
                z = zb[q]
                if mode == 1:
                    z = fabs(z) * z
                elif mode == 2:
                    z = z * z * z
                elif mode == 3:
                    z = pow(fabs(z), e) * z
                zb[q] = z * weights[q]
            for j in range(m):
                acc = 0.0
                for q in range(Q):
                    acc += zb[q] * derivs[j, q]
                out[p, j] = -acc
    return out_arr


cdef inline void _offset(double t, const double[::1] knot_t, const double[:, ::1] knot_c,
                         double* c, Py_ssize_t m) noexcept nogil:
    cdef Py_ssize_t nk = knot_t.shape[0], i, j
    cdef double s
    if nk == 0:
        for j in range(m):
            c[j] = 0.0
        return
    if nk == 1 or t <= knot_t[0]:
        for j in range(m):
            c[j] = knot_c[0, j]
        return
    if t >= knot_t[nk - 1]:
        for j in range(m):
            c[j] = knot_c[nk - 1, j]
        return
    i = 0
    while knot_t[i + 1] <= t:
        i += 1
    s = (t - knot_t[i]) / (knot_t[i + 1] - knot_t[i])
    for j in range(m):
        c[j] = knot_c[i, j] + s * (knot_c[i + 1, j] - knot_c[i, j])


def em_affine(const double[:, ::1] x0, const double[:, :, ::1] dW, const double[:, ::1] M,
              double dt, const double[:, ::1] K, const double[::1] knot_t,
              const double[:, ::1] knot_c,
              double kappa, int noise_kind, double sigma, int tamed,
              double taming_power, driver, double[:, :, ::1] out):
    cdef Py_ssize_t P = dW.shape[0], N = dW.shape[1], k = dW.shape[2]
    cdef Py_ssize_t m = x0.shape[1]
    cdef Py_ssize_t p, n, i, j
    cdef double t, acc, nrm, scale
    cdef bint has_driver = driver is not None
    cdef bint clamp = kappa < INFINITY
    cdef const double[:, :, ::1] drv
    if has_driver:
        drv = driver
    else:
        drv = out
    status_arr = np.full(P, -1, dtype=np.int64)
    cdef long long[::1] status = status_arr
    x_arr = np.empty(m)
    c_arr = np.empty(m)
    v_arr = np.empty(m)
    d_arr = np.empty(m)
    z_arr = np.empty(m)
    cdef double[::1] x = x_arr, c = c_arr, v = v_arr, D = d_arr, zbuf = z_arr
    cdef const double* zp
    with nogil:
        for p in range(P):
            for j in range(m):
                x[j] = x0[p, j]
                out[p, 0, j] = x[j]
            for n in range(N):
                t = n * dt
                # z: driver state (auxiliary mode) or the current state
                if has_driver:
                    zp = &drv[p, n, 0]
                else:
                    for j in range(m):
                        zbuf[j] = x[j]
                    zp = &zbuf[0]
                _offset(t, knot_t, knot_c, &c[0], m)
                nrm = 0.0
                for i in range(m):
                    acc = 0.0
                    for j in range(m):
                        acc = acc + K[i, j] * zp[j]
                    v[i] = -acc - c[i]
                    nrm += v[i] * v[i]
                if clamp:
                    nrm = sqrt(nrm)
                    if nrm > kappa:
                        scale = kappa / nrm
                        for i in range(m):
                            v[i] = v[i] * scale
                for i in range(m):
                    acc = 0.0
                    for j in range(m):
                        acc = acc + M[i, j] * x[j]
                    D[i] = acc + v[i]
                if tamed:
                    nrm = 0.0
                    for i in range(m):
                        nrm += D[i] * D[i]
                    scale = 1.0 + dt * pow(sqrt(nrm), taming_power)
                    for i in range(m):
                        D[i] = D[i] / scale
                for i in range(m):
                    x[i] = x[i] + dt * D[i]
                if noise_kind == NOISE_ADDITIVE:
                    for i in range(k):
                        x[i] += sigma * dW[p, n, i]
                elif noise_kind == NOISE_MULTIPLICATIVE:
                    for i in range(k):
                        x[i] += sigma * zp[i] * dW[p, n, i]
                for i in range(m):
                    if not isfinite(x[i]):
                        status[p] = n
                        break
                if status[p] >= 0:
                    for i in range(n + 1, N + 1):
                        for j in range(m):
                            out[p, i, j] = NAN
                    break
                for j in range(m):
                    out[p, n + 1, j] = x[j]
    return status_arr
