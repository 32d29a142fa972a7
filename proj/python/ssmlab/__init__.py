"""Diagonal state-space model lab: reparameterizations, memory kernels, training and perturbation sweeps."""

from ._ssmlab import *  # noqa: F401,F403
from ._ssmlab import __doc__  # noqa: F401
