"""Differentiable particle filtering with normalizing-flow models.

Subpackage layout:

* :mod:`flowfilter.autodiff` -- tape-based reverse-mode AD over float64 arrays
* :mod:`flowfilter.flows` -- planar and coupling normalizing flows
* :mod:`flowfilter.models` -- state-space models, simulators, Kalman baseline
* :mod:`flowfilter.resampling` -- entropy-regularized transport and multinomial
  resamplers
* :mod:`flowfilter.filter` -- the differentiable particle filter loop
* :mod:`flowfilter.training` -- losses and the Adam training harness
* :mod:`flowfilter.estimator` -- scikit-learn style front end
* :mod:`flowfilter.cli` -- benchmark command line
"""

from flowfilter.autodiff import (
    NumericError,
    ParamStore,
    ShapeError,
    Tape,
    Tensor,
    grad,
    load_checkpoint,
    no_grad,
    save_checkpoint,
    use_tape,
)

__all__ = [
    "NumericError",
    "ParamStore",
    "ShapeError",
    "Tape",
    "Tensor",
    "grad",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
    "use_tape",
]

__version__ = "0.1.0"
