"""Training, attacking, and certifying small neural networks whose input
curvature is kept under control.

The package is built around exact Hessian-vector products from a from-scratch
reverse-mode autodiff engine; on top of that sit operator-norm estimation of
input Hessians, curvature-regularized training, PGD attack evaluation, and
second-order robustness certificates.
"""

from .tensor import Tensor, grad, no_grad
from .graph import DiffGraph

__version__ = "0.1.0"

__all__ = ["Tensor", "grad", "no_grad", "DiffGraph", "__version__"]
