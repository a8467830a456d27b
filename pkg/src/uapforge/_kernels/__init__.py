"""Backend dispatch for the convolution hot kernels.

The compiled extension is preferred when built; the NumPy fallback is always
available. ``UAPFORGE_BACKEND=numpy`` forces the fallback (useful for the
benchmark and for debugging).
"""

import os

from . import _numpy

if os.environ.get("UAPFORGE_BACKEND", "").lower() == "numpy":
    _impl = _numpy
    HAVE_NATIVE = False
else:
    try:
        from . import _native as _impl  # type: ignore[attr-defined]

        HAVE_NATIVE = True
    except ImportError:
        _impl = _numpy
        HAVE_NATIVE = False

BACKEND = "native" if HAVE_NATIVE else "numpy"

temporal_conv_forward = _impl.temporal_conv_forward
temporal_conv_backward_input = _impl.temporal_conv_backward_input
temporal_conv_backward_weights = _impl.temporal_conv_backward_weights
