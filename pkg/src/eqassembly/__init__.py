"""Equivariant flow matching for multi-piece rigid assembly of point clouds.

The package is organized around eight building blocks:

``lie``
    SO(3)/SE(3)/SE(3)^N group and algebra operations, noise sampling, and
    the least-squares rotation correction between pose tuples.
``irreps``
    Real spherical harmonics, Wigner-D matrices, coupling tensors, and the
    two interchangeable rotation-equivariant message kernels.
``tensorcore``
    A small reverse-mode automatic differentiation engine over numpy arrays.
``equinet``
    The equivariant attention network that predicts one twist per piece.
``flowmatch``
    Training-pair construction and the regression training loop.
``sampler``
    Lie-group Runge-Kutta integration of the learned field from noise.
``data``
    Synthetic assembly generation, dataset io, and evaluation metrics.
``cli``
    Command-line entry points (gen / train / sample / eval / check / bench).
"""

__version__ = "0.1.0"

__all__ = [
    "lie",
    "irreps",
    "tensorcore",
    "equinet",
    "flowmatch",
    "sampler",
    "data",
    "cli",
]
