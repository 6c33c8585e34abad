"""Polymerized-feature domain adaptation for radiotherapy dose-map prediction.

Subpackages/modules:

``tensor``/``ops``     float64 reverse-mode autodiff core
``kernels``            conv3x3 hot loops (Cython, numpy fallback)
``attention``          patch embedding, PFM blocks, MSA/MCA
``networks``           Agg/Infer networks and checkpoints
``losses``             bridge, L1, distillation and total objectives
``training``           Adam, schedule, two-stage training
``phantom``/``pfmt``   synthetic data and the PFMT tensor container
``dosimetry``          DVH, Dx, Vx, HI, CI, APE
"""
from .tensor import ComputeGraph, Tensor, finite_checks, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "ComputeGraph", "no_grad", "finite_checks", "__version__"]
