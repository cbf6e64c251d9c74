"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .exceptions import DomainError


def check_vector(x, name, size=None, *, positive=False, nonnegative=False):
    """Return ``x`` as a finite 1-D float array, raising :class:`DomainError` otherwise."""
    arr = np.array(x, dtype=float, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise DomainError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if size is not None and arr.shape[0] != size:
        raise DomainError(f"{name} must have length {size}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    if positive and np.any(arr <= 0):
        raise DomainError(f"{name} must be strictly positive")
    if nonnegative and np.any(arr < 0):
        raise DomainError(f"{name} must be nonnegative")
    arr.flags.writeable = False
    return arr


def check_square(M, name, size=None):
    arr = np.array(M, dtype=float, copy=True)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DomainError(f"{name} must be a square matrix, got shape {arr.shape}")
    if size is not None and arr.shape[0] != size:
        raise DomainError(f"{name} must be {size}x{size}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def check_positive_scalar(x, name):
    x = float(x)
    if not np.isfinite(x) or x <= 0:
        raise DomainError(f"{name} must be a positive finite number, got {x}")
    return x


def symmetrize(M):
    """Return ``(M + M.T) / 2``."""
    return 0.5 * (M + M.T)

