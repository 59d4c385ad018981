"""Backend selection for the brute-force kernels.

The compiled extension is used when it was built; set ``DIPSEP_PURE_PYTHON=1``
to force the pure-Python loops (the benchmark and backend-parity tests do).
"""
import os

import numpy as np

from . import _pykernels

_FORCE_PY = os.environ.get("DIPSEP_PURE_PYTHON", "") not in ("", "0")

try:
    if _FORCE_PY:
        raise ImportError("pure-Python backend requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"


def _f64(a, ndim):
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    return arr


def mmd_triple_sum(cx, cy, px, py, sigma, backend=None):
    impl = _select(backend)
    return float(impl.mmd_triple_sum(_f64(cx, 2), _f64(cy, 2), _f64(px, 1), _f64(py, 1), float(sigma)))


def pairwise_distances(points, backend=None):
    return _select(backend).pairwise_distances(_f64(points, 2))


def entropy_bits(pmf, backend=None):
    return float(_select(backend).entropy_bits(_f64(pmf, 1)))


def joint_entropy_bits(joint, backend=None):
    return float(_select(backend).joint_entropy_bits(_f64(joint, 2)))


def cue_joints(p1, p2, channel, backend=None):
    return _select(backend).cue_joints(_f64(p1, 1), _f64(p2, 1), _f64(channel, 2))


def _select(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _pykernels
    if backend == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown backend {backend!r}; expected 'python' or 'cython'")
