"""Pure-Python twins of the compiled kernels in ``_ckernels.pyx``.

Plain nested loops on purpose: these are the reference the compiled
versions are checked against, and the fallback when no compiler is around.
"""
import math

import numpy as np


def _sqdist(a, i, b, j):
    acc = 0.0
    for d in range(len(a[i])):
        diff = a[i][d] - b[j][d]
        acc += diff * diff
    return acc


def _weighted_kernel_sum(a, pa, b, pb, two_sigma_sq):
    total = 0.0
    for j in range(len(a)):
        for k in range(len(b)):
            total += pa[j] * pb[k] * math.exp(-_sqdist(a, j, b, k) / two_sigma_sq)
    return total


def mmd_triple_sum(cx, cy, px, py, sigma):
    cx, cy = np.asarray(cx).tolist(), np.asarray(cy).tolist()
    px, py = np.asarray(px).tolist(), np.asarray(py).tolist()
    two_sigma_sq = 2.0 * sigma * sigma
    xx = _weighted_kernel_sum(cx, px, cx, px, two_sigma_sq)
    xy = _weighted_kernel_sum(cx, px, cy, py, two_sigma_sq)
    yy = _weighted_kernel_sum(cy, py, cy, py, two_sigma_sq)
    return xx - 2.0 * xy + yy


def pairwise_distances(points):
    """Euclidean distances of all unordered pairs i < j, in row-major order."""
    pts = np.asarray(points).tolist()
    out = []
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            out.append(math.sqrt(_sqdist(pts, i, pts, j)))
    return np.asarray(out, dtype=np.float64)


def entropy_bits(pmf):
    h = 0.0
    for p in np.asarray(pmf).tolist():
        if p > 0.0:
            h -= p * math.log2(p)
    return h


def joint_entropy_bits(joint):
    h = 0.0
    for row in np.asarray(joint).tolist():
        for p in row:
            if p > 0.0:
                h -= p * math.log2(p)
    return h


def cue_joints(p1, p2, channel):
    """Enumerate p(s1, s2, m = s1 + s2, c) and return the (s1,c), (s2,c), (m,c) marginals."""
    p1, p2 = np.asarray(p1).tolist(), np.asarray(p2).tolist()
    ch = np.asarray(channel).tolist()
    n1, n2, nc = len(p1), len(p2), len(ch[0])
    s1c = [[0.0] * nc for _ in range(n1)]
    s2c = [[0.0] * nc for _ in range(n2)]
    mc = [[0.0] * nc for _ in range(n1 + n2 - 1)]
    for a in range(n1):
        for b in range(n2):
            for c in range(nc):
                mass = p1[a] * p2[b] * ch[a + b][c]
                s1c[a][c] += mass
                s2c[b][c] += mass
                mc[a + b][c] += mass
    return np.array(s1c), np.array(s2c), np.array(mc)
