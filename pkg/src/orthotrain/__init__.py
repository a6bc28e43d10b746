"""OPT: training neural layers as learned rotations of frozen random neurons, in numpy.

Hidden neurons are parameterized as ``W = R V``: ``V`` is drawn at random
and frozen, and only the orthogonal matrix ``R`` is learned, which keeps
the hyperspherical energy of the neurons fixed at its initial value.
"""

from . import autodiff, energy, linalg, ortho
from .errors import OrthoTrainError

__version__ = "0.1.0"

__all__ = ["OrthoTrainError", "autodiff", "energy", "linalg", "ortho", "__version__"]
