# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel lane.

Mirrors ``_fallback`` operation for operation. The build pins
-ffp-contract=off so the compiler cannot fuse multiply-add; matmul therefore
rounds exactly like the pure-python lane (one multiply, one add, ascending
k) and the two lanes agree bit for bit. ``combine_topk`` uses hardware/libm
fma for the exact product residue, which equals the Dekker-split residue the
numpy lane computes.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, erf, exp, fma, frexp, isfinite, ldexp, rint

cnp.import_array()

LANE = "compiled"

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327
cdef double BF16_MIN_NORMAL = 2.0 ** -126


def matmul(cnp.ndarray[double, ndim=2, mode="c"] a,
           cnp.ndarray[double, ndim=2, mode="c"] b):
    cdef Py_ssize_t t = a.shape[0], kdim = a.shape[1], d = b.shape[1]
    cdef cnp.ndarray[double, ndim=2, mode="c"] out = np.zeros((t, d), dtype=np.float64)
    cdef Py_ssize_t i, j, k
    cdef double aik
    for i in range(t):
        for k in range(kdim):
            aik = a[i, k]
            for j in range(d):
                out[i, j] = out[i, j] + aik * b[k, j]
    return out


def gelu(cnp.ndarray[double, ndim=2, mode="c"] x):
    cdef Py_ssize_t n0 = x.shape[0], n1 = x.shape[1]
    cdef cnp.ndarray[double, ndim=2, mode="c"] out = np.empty((n0, n1), dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double v, cdf
    for i in range(n0):
        for j in range(n1):
            v = x[i, j]
            cdf = 0.5 * (1.0 + erf(v * INV_SQRT2))
            out[i, j] = v * cdf
    return out


def gelu_grad(cnp.ndarray[double, ndim=2, mode="c"] x):
    cdef Py_ssize_t n0 = x.shape[0], n1 = x.shape[1]
    cdef cnp.ndarray[double, ndim=2, mode="c"] out = np.empty((n0, n1), dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double v, cdf, pdf
    for i in range(n0):
        for j in range(n1):
            v = x[i, j]
            cdf = 0.5 * (1.0 + erf(v * INV_SQRT2))
            pdf = exp(-0.5 * (v * v)) * INV_SQRT2PI
            out[i, j] = cdf + v * pdf
    return out


cdef inline double _bf16_one(double v) nogil:
    cdef double frac, q, mag
    cdef int expo
    if not isfinite(v):
        return v
    mag = v if v >= 0.0 else -v
    if mag < BF16_MIN_NORMAL:
        return 0.0 if v >= 0.0 else -0.0
    frac = frexp(v, &expo)
    q = rint(ldexp(frac, 8))
    if q >= 256.0 or q <= -256.0:
        q = 128.0 if q > 0.0 else -128.0
        expo += 1
    if expo - 1 > 127:
        return INFINITY if v > 0.0 else -INFINITY
    return ldexp(q, expo - 8)


def bf16_quantize(cnp.ndarray[double, ndim=2, mode="c"] x):
    cdef Py_ssize_t n0 = x.shape[0], n1 = x.shape[1]
    cdef cnp.ndarray[double, ndim=2, mode="c"] out = np.empty((n0, n1), dtype=np.float64)
    cdef Py_ssize_t i, j
    for i in range(n0):
        for j in range(n1):
            out[i, j] = _bf16_one(x[i, j])
    return out


def combine_topk(cnp.ndarray[double, ndim=2, mode="c"] weights,
                 cnp.ndarray[double, ndim=3, mode="c"] outputs):
    cdef Py_ssize_t t = weights.shape[0], k = weights.shape[1], d = outputs.shape[2]
    cdef cnp.ndarray[double, ndim=2, mode="c"] out = np.empty((t, d), dtype=np.float64)
    cdef Py_ssize_t i, j, c
    cdef double w, y, acc, err, p, pe, s, tmp, se
    for i in range(t):
        for c in range(d):
            w = weights[i, 0]
            y = outputs[0, i, c]
            acc = w * y
            err = fma(w, y, -acc)
            for j in range(1, k):
                w = weights[i, j]
                y = outputs[j, i, c]
                p = w * y
                pe = fma(w, y, -p)
                s = acc + p
                tmp = s - acc
                se = (acc - (s - tmp)) + (p - tmp)
                acc = s
                err = err + (se + pe)
            out[i, c] = acc + err
    return out
