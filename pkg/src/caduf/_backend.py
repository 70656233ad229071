"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``CADUF_BACKEND=python`` to force the fallback.
"""

import os

import numpy as np

from . import _pykernels

_py = _pykernels
_c = None
if os.environ.get("CADUF_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels as _c
    except ImportError:
        _c = None

_active = _c if _c is not None else _py


def name():
    return "cython" if _active is _c and _c is not None else "python"


def available():
    return ["python"] + (["cython"] if _c is not None else [])


def use(backend):
    """Switch the active kernel backend (``"cython"`` or ``"python"``)."""
    global _active
    if backend == "python":
        _active = _py
    elif backend == "cython":
        if _c is None:
            raise RuntimeError("compiled kernels are not built")
        _active = _c
    else:
        raise ValueError(f"unknown backend {backend!r}")


def module(backend=None):
    if backend is None:
        return _active
    return _c if backend == "cython" else _py


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def bilinear_gather(inp, py, px):
    return _active.bilinear_gather(_f64(inp), _f64(py), _f64(px))


def bilinear_scatter(grad, inp, py, px):
    return _active.bilinear_scatter(_f64(grad), _f64(inp), _f64(py), _f64(px))


def dynamic_filter_forward(z, c, p, s):
    return _active.dynamic_filter_forward(_f64(z), _f64(c), int(p), int(s))


def dynamic_filter_backward(g, z, c, p, s):
    return _active.dynamic_filter_backward(_f64(g), _f64(z), _f64(c), int(p), int(s))
