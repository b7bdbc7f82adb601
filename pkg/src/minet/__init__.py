"""Multi-contrast MRI super-resolution: a two-branch residual network with
stage-wise fusion, trained end to end on a minimal reverse-mode autodiff
engine, plus the synthetic data pipeline and metrics used to exercise it."""

from .autodiff import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "__version__"]
