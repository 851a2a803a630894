"""maskdist: a desk-scale laboratory for masked diffusion models.

Trains small categorical token predictors on synthetic discrete data,
samples them with multi-step reverse processes, distills them into
one-step generators by token-level distribution matching, and checks
every formula against independent oracles (finite differences, exact
enumeration, closed forms).
"""

from maskdist._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
