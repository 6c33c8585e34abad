"""Hot conv3x3 kernels: compiled extension when built, numpy otherwise.

Set ``PFMDOSE_KERNELS=numpy`` to force the fallback.
"""
import os

from . import _numpy_conv as numpy_backend

compiled_backend = None
if os.environ.get("PFMDOSE_KERNELS", "").lower() != "numpy":
    try:
        from . import _conv3x3 as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

if compiled_backend is not None:
    BACKEND = "cython"
    conv3x3_forward = compiled_backend.conv3x3_forward
    conv3x3_backward = compiled_backend.conv3x3_backward
else:
    BACKEND = "numpy"
    conv3x3_forward = numpy_backend.conv3x3_forward
    conv3x3_backward = numpy_backend.conv3x3_backward

__all__ = ["BACKEND", "conv3x3_forward", "conv3x3_backward", "numpy_backend", "compiled_backend"]
