"""Backend selection for the sliding-window kernels.

The compiled extension is used when it imported cleanly; otherwise the numpy
fallback is used.  ``PCDARTS_KERNELS=python`` forces the fallback.
"""
import os

import numpy as np

from . import _fallback

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _fallback}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_NAMES = ("dw_conv_forward", "dw_conv_backward", "col2im",
          "window_max_forward", "window_max_backward",
          "window_sum_forward", "window_sum_backward")


def available():
    return sorted(_BACKENDS)


def use(name):
    """Switch every kernel entry point to backend ``name``."""
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available()}")
    global BACKEND
    mod = _BACKENDS[name]
    g = globals()
    for fn in _NAMES:
        g[fn] = _contiguous(getattr(mod, fn)) if name == "cython" else getattr(mod, fn)
    BACKEND = name


def _contiguous(fn):
    def wrapped(*args):
        args = tuple(np.ascontiguousarray(a) if isinstance(a, np.ndarray) else a for a in args)
        return fn(*args)
    wrapped.__name__ = fn.__name__
    return wrapped


BACKEND = None
_requested = os.environ.get("PCDARTS_KERNELS", "").strip().lower()
if _requested:
    use(_requested)
else:
    use("cython" if "cython" in _BACKENDS else "python")
