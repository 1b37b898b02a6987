"""Hot bilinear sampling kernels with a compiled backend and numpy fallback.

The compiled Cython module is used when it was built; otherwise the pure numpy
implementation is selected. Set ``DEMF_KERNELS=python`` to force the fallback.
"""

import os

from . import _fallback

python_backend = _fallback
compiled_backend = None

try:
    from . import _bilinear_cy as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

if compiled_backend is not None and os.environ.get("DEMF_KERNELS", "").lower() != "python":
    backend = compiled_backend
else:
    backend = python_backend

BACKEND = backend.NAME


_COMPILED_DTYPES = ("float32", "float64")


def _pick(dtype):
    # extended precision (gradient-check oracle) only runs on the fallback
    return backend if dtype.name in _COMPILED_DTYPES else python_backend


def sample_forward(value, loc):
    """Gather bilinear samples: ``(H, W, M, D)`` x ``(N, M, K, 2)`` -> ``(N, M, K, D)``."""
    return _pick(value.dtype).sample_forward(value, loc)


def sample_backward(value, loc, grad_out):
    """Return ``(grad_value, grad_loc)`` for :func:`sample_forward`."""
    return _pick(value.dtype).sample_backward(value, loc, grad_out)
