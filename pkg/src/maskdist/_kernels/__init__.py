"""Kernel backend selection.

The compiled extension (``_core``) is preferred when built; otherwise the
numpy fallback is used. Set MASKDIST_KERNELS=python or =compiled to force a
backend (forcing "compiled" raises if the extension is missing).
"""

import os

_requested = os.environ.get("MASKDIST_KERNELS", "auto")

if _requested == "python":
    from maskdist._kernels import numpy_ref as impl

    BACKEND = "python"
else:
    try:
        from maskdist._kernels import _core as impl

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        from maskdist._kernels import numpy_ref as impl

        BACKEND = "python"

KERNEL_NAMES = (
    "softmax_rows",
    "softmax_backward_rows",
    "log_softmax_rows",
    "log_softmax_backward_rows",
    "layernorm_rows",
    "layernorm_backward_rows",
    "gelu_forward",
    "gelu_backward",
    "gather_rows",
    "scatter_add_rows",
    "categorical_rows",
)

softmax_rows = impl.softmax_rows
softmax_backward_rows = impl.softmax_backward_rows
log_softmax_rows = impl.log_softmax_rows
log_softmax_backward_rows = impl.log_softmax_backward_rows
layernorm_rows = impl.layernorm_rows
layernorm_backward_rows = impl.layernorm_backward_rows
gelu_forward = impl.gelu_forward
gelu_backward = impl.gelu_backward
gather_rows = impl.gather_rows
scatter_add_rows = impl.scatter_add_rows
categorical_rows = impl.categorical_rows
