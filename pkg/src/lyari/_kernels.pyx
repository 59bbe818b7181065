# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; same contracts as ``_kernels_py``."""

import numpy as np
from libc.math cimport exp, expm1, log, log2, INFINITY

cdef double LOG2E = 1.0 / log(2.0)


def entropy_rate_batch(x, double mu):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef Py_ssize_t n = xv.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double xi, tail, p0, om, head, bracket
    for i in range(n):
        xi = xv[i]
        if not xi > 0:
            raise ValueError("entropy diverges at x <= 0")
        tail = exp(-(1.0 - mu) * xi)
        p0 = -expm1(-(1.0 - mu) * xi)
        om = -expm1(-xi)
        head = -p0 * log2(p0) if p0 > 0.0 else 0.0
        bracket = 1.0 + (xi / om - mu * xi - log(om)) * LOG2E
        ov[i] = head + tail * bracket
    return out.reshape(np.shape(x))


def grid_search(double xp, re_term, de, dly, rc_term, dc, ptot, tsend,
                double V, double rho1, double rho2, double d_max,
                double d_max_trans, double p_max):
    cdef double[:, ::1] re_v = np.ascontiguousarray(re_term, dtype=np.float64)
    cdef double[:, ::1] de_v = np.ascontiguousarray(de, dtype=np.float64)
    cdef double[:, ::1] dly_v = np.ascontiguousarray(dly, dtype=np.float64)
    cdef double[::1] rc_v = np.ascontiguousarray(rc_term, dtype=np.float64)
    cdef double[::1] dc_v = np.ascontiguousarray(dc, dtype=np.float64)
    cdef double[::1] pt_v = np.ascontiguousarray(ptot, dtype=np.float64)
    cdef double[::1] ts_v = np.ascontiguousarray(tsend, dtype=np.float64)
    cdef Py_ssize_t nl = re_v.shape[0], nq = re_v.shape[1], npt = rc_v.shape[0]
    cdef Py_ssize_t i, j, k, best = -1
    cdef double best_obj = INFINITY, o
    cdef long n_feas = 0, n_trans = 0, n_delay = 0, n_power = 0
    cdef bint bad_t, bad_d, bad_p
    for i in range(nl):
        for j in range(nq):
            for k in range(npt):
                bad_t = not (ts_v[k] <= d_max_trans)
                bad_d = not (dly_v[i, j] + ts_v[k] <= d_max)
                bad_p = not (pt_v[k] <= p_max)
                n_trans += bad_t
                n_delay += bad_d
                n_power += bad_p
                if bad_t or bad_d or bad_p:
                    continue
                n_feas += 1
                o = xp * (re_v[i, j] - rc_v[k]) + V * (de_v[i, j] + rho1 * dc_v[k] + rho2 * pt_v[k])
                if o < best_obj:
                    best_obj = o
                    best = (i * nq + j) * npt + k
    return best, best_obj, n_feas, n_trans, n_delay, n_power
