# cython: language_level=3
"""Compiled brute-force kernels. Mirrors ``dipsep._pykernels`` exactly."""
import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log2, sqrt

cnp.import_array()


cdef inline double _sqdist(const double[:, :] a, Py_ssize_t i,
                           const double[:, :] b, Py_ssize_t j) noexcept nogil:
    cdef Py_ssize_t d
    cdef double acc = 0.0, diff
    for d in range(a.shape[1]):
        diff = a[i, d] - b[j, d]
        acc += diff * diff
    return acc


cdef double _weighted_kernel_sum(const double[:, :] a, const double[:] pa,
                                 const double[:, :] b, const double[:] pb,
                                 double two_sigma_sq) noexcept nogil:
    cdef Py_ssize_t j, k
    cdef double total = 0.0
    for j in range(a.shape[0]):
        for k in range(b.shape[0]):
            total += pa[j] * pb[k] * exp(-_sqdist(a, j, b, k) / two_sigma_sq)
    return total


def mmd_triple_sum(const double[:, :] cx, const double[:, :] cy,
                   const double[:] px, const double[:] py, double sigma):
    cdef double two_sigma_sq = 2.0 * sigma * sigma
    cdef double xx, xy, yy
    with nogil:
        xx = _weighted_kernel_sum(cx, px, cx, px, two_sigma_sq)
        xy = _weighted_kernel_sum(cx, px, cy, py, two_sigma_sq)
        yy = _weighted_kernel_sum(cy, py, cy, py, two_sigma_sq)
    return xx - 2.0 * xy + yy


def pairwise_distances(const double[:, :] points):
    """Euclidean distances of all unordered pairs i < j, in row-major order."""
    cdef Py_ssize_t n = points.shape[0], i, j, pos = 0
    out = np.empty(n * (n - 1) // 2, dtype=np.float64)
    cdef double[:] view = out
    for i in range(n):
        for j in range(i + 1, n):
            view[pos] = sqrt(_sqdist(points, i, points, j))
            pos += 1
    return out


def entropy_bits(const double[:] pmf):
    cdef Py_ssize_t i
    cdef double h = 0.0
    for i in range(pmf.shape[0]):
        if pmf[i] > 0.0:
            h -= pmf[i] * log2(pmf[i])
    return h


def joint_entropy_bits(const double[:, :] joint):
    cdef Py_ssize_t i, j
    cdef double h = 0.0, p
    for i in range(joint.shape[0]):
        for j in range(joint.shape[1]):
            p = joint[i, j]
            if p > 0.0:
                h -= p * log2(p)
    return h


def cue_joints(const double[:] p1, const double[:] p2, const double[:, :] channel):
    """Enumerate p(s1, s2, m = s1 + s2, c) and return the (s1,c), (s2,c), (m,c) marginals."""
    cdef Py_ssize_t n1 = p1.shape[0], n2 = p2.shape[0], nc = channel.shape[1]
    cdef Py_ssize_t a, b, c
    cdef double mass
    s1c = np.zeros((n1, nc), dtype=np.float64)
    s2c = np.zeros((n2, nc), dtype=np.float64)
    mc = np.zeros((n1 + n2 - 1, nc), dtype=np.float64)
    cdef double[:, :] v1 = s1c, v2 = s2c, vm = mc
    for a in range(n1):
        for b in range(n2):
            for c in range(nc):
                mass = p1[a] * p2[b] * channel[a + b, c]
                v1[a, c] += mass
                v2[b, c] += mass
                vm[a + b, c] += mass
    return s1c, s2c, mc
