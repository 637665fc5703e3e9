"""Recurrent-scan kernels: compiled extension when built, numpy otherwise.

The compiled path only handles float64 (the training dtype); float32
inputs always take the numpy fallback. ``backend()`` reports which
implementation float64 calls will use.
"""

import numpy as np

from . import _gru_np

try:
    from . import _gru_cy
except ImportError:
    _gru_cy = None

HAVE_COMPILED = _gru_cy is not None


def backend() -> str:
    return "compiled" if HAVE_COMPILED else "numpy"


def scan_forward(xg, h0, u):
    if HAVE_COMPILED and xg.dtype == np.float64:
        return _gru_cy.scan_forward(xg, np.ascontiguousarray(h0), u)
    return _gru_np.scan_forward(xg, h0, u)


def scan_backward(dhs, cache, u):
    if HAVE_COMPILED and dhs.dtype == np.float64:
        return _gru_cy.scan_backward(dhs, cache, u)
    return _gru_np.scan_backward(dhs, cache, u)
