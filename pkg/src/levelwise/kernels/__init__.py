"""Numeric kernel backends.

Two interchangeable implementations of the hot inner-loop kernels:

* ``reference`` -- pure NumPy, always available;
* ``_fastk``    -- Cython extension compiled at install time.

The compiled backend is selected automatically at import when present.
Set the environment variable ``LEVELWISE_KERNELS=python`` (or ``compiled``)
to force a backend, or call :func:`use_backend` programmatically (used by
the backend-agreement tests and the benchmark script).
"""

import os

from . import reference

try:
    from . import _fastk
except ImportError:  # pragma: no cover - depends on build environment
    _fastk = None

_KERNEL_NAMES = [
    "sigmoid_fwd",
    "sigmoid_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "layernorm_fwd",
    "layernorm_bwd",
    "bce_fwd",
    "bce_bwd",
    "adam_step",
]

_active = None


def available_backends():
    names = ["python"]
    if _fastk is not None:
        names.append("compiled")
    return names


def backend_name():
    return _active


def use_backend(name):
    """Bind the named backend's kernels as this module's functions."""
    global _active
    if name == "python":
        mod = reference
    elif name == "compiled":
        if _fastk is None:
            raise RuntimeError("compiled kernel extension is not available")
        mod = _fastk
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    for fn in _KERNEL_NAMES:
        globals()[fn] = getattr(mod, fn)
    _active = name


_requested = os.environ.get("LEVELWISE_KERNELS", "").strip().lower()
if _requested:
    use_backend(_requested)
else:
    use_backend("compiled" if _fastk is not None else "python")
