"""Kernel backend selection.

The compiled extension is used when it imports; set ``MOTE_FORCE_PYTHON=1``
to pin the numpy fallback (benchmarks and cross-backend tests do this).
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("MOTE_FORCE_PYTHON", "") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND


def _c(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def use(name):
    """Switch backend at runtime (``"compiled"`` or ``"python"``)."""
    global _impl, BACKEND
    if name == "python":
        _impl = _kernels_py
    elif name == "compiled":
        from . import _kernels

        _impl = _kernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = _impl.BACKEND


def compiled_available():
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return False
    return True


def matmul(a, b):
    return _impl.matmul(_c(a), _c(b))


def adapter_forward(h_out, h_msa, w_down, w_up, parallel):
    return _impl.adapter_forward(_c(h_out), _c(h_msa), _c(w_down), _c(w_up), bool(parallel))


def cosine_sims(feats, protos, eps=1e-12):
    return _impl.cosine_sims(_c(feats), _c(protos), eps)


class PrototypeMatrix:
    """Prototypes laid out once for repeated cosine scoring (transpose + norms)."""

    def __init__(self, protos, eps=1e-12):
        protos = _c(protos)
        self.eps = eps
        self.transposed = np.ascontiguousarray(protos.T)
        self.norms = _impl.prototype_norms(protos, eps)

    def sims(self, feats):
        return _impl.cosine_prepared(_c(feats), self.transposed, self.norms, self.eps)


def top2(sims):
    return _impl.top2(_c(sims))
