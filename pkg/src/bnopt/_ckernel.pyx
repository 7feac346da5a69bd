# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled cross-correlation for the mixed kernel.

Per pair the Matérn polynomial factors are multiplied and all exponents
summed, so each entry costs a single ``exp``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs

cnp.import_array()

cdef double SQRT3 = 1.7320508075688772
cdef double SQRT5 = 2.23606797749979


def cross_corr(
    const double[:, ::1] w1, const cnp.int64_t[:, ::1] z1, const double[:, ::1] v1,
    const double[:, ::1] w2, const cnp.int64_t[:, ::1] z2, const double[:, ::1] v2,
    const double[::1] theta, const double[::1] gamma, const double[::1] phi,
    const cnp.int64_t[::1] parent, const cnp.int64_t[::1] level, const cnp.int64_t[::1] qual,
    int nu_code, bint symmetric=False,
):
    cdef Py_ssize_t n1 = w1.shape[0], n2 = w2.shape[0]
    cdef Py_ssize_t d = w1.shape[1], q = z1.shape[1], m = v1.shape[1]
    cdef Py_ssize_t a, b, i, k, t, b0
    cdef double poly, expo, dist, s
    out = np.empty((n1, n2), dtype=np.float64)
    cdef double[:, ::1] res = out
    with nogil:
        for a in range(n1):
            b0 = a if symmetric else 0
            for b in range(b0, n2):
                poly = 1.0
                expo = 0.0
                for i in range(d):
                    s = theta[i] * fabs(w1[a, i] - w2[b, i])
                    if nu_code == 3:
                        s = SQRT3 * s
                        poly = poly * (1.0 + s)
                    elif nu_code == 5:
                        s = SQRT5 * s
                        poly = poly * (1.0 + s + s * s / 3.0)
                    expo = expo + s
                for k in range(q):
                    if z1[a, k] != z2[b, k]:
                        expo = expo + gamma[k]
                for t in range(m):
                    k = parent[t]
                    if z1[a, k] == level[t] and z2[b, k] == level[t]:
                        if qual[t]:
                            dist = 1.0 if v1[a, t] != v2[b, t] else 0.0
                        else:
                            dist = fabs(v1[a, t] - v2[b, t])
                        expo = expo + phi[t] * dist
                res[a, b] = poly * exp(-expo)
                if symmetric:
                    res[b, a] = res[a, b]
    return out
