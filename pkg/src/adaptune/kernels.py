"""Backend selection for the hot kernels.

The compiled extension is used when it imports; set ``ADAPTUNE_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

import numpy as np

from . import _pykernels

_ext = None
if os.environ.get("ADAPTUNE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _ext
    except ImportError:  # extension not built
        _ext = None

if _ext is not None:
    BACKEND = "cython"
    _impl = _ext
else:
    BACKEND = "python"
    _impl = _pykernels


def conv2d_forward(x, w):
    return _impl.conv2d_forward(np.ascontiguousarray(x, dtype=np.float64),
                                np.ascontiguousarray(w, dtype=np.float64))


def conv2d_backward(x, w, dout):
    return _impl.conv2d_backward(np.ascontiguousarray(x, dtype=np.float64),
                                 np.ascontiguousarray(w, dtype=np.float64),
                                 np.ascontiguousarray(dout, dtype=np.float64))


def true_class_ranks(probs, labels):
    return _impl.true_class_ranks(np.ascontiguousarray(probs, dtype=np.float64),
                                  np.ascontiguousarray(labels, dtype=np.int64))
