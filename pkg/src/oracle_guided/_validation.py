"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .exceptions import DimensionMismatch, LengthMismatch


def as_matrix(M, name="matrix", *, square=False):
    """Return ``M`` as a finite 2-D float array.

    Scalars become 1x1 and 1-D inputs become column vectors, which is the
    convention used for single-input B matrices throughout the package.
    """
    arr = np.asarray(M, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    if square and arr.shape[0] != arr.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {arr.shape}")
    return arr


def as_vector(v, name="vector", size=None):
    arr = np.asarray(v, dtype=float).reshape(-1)
    if size is not None and arr.shape[0] != size:
        raise DimensionMismatch(f"{name} must have length {size}, got {arr.shape[0]}")
    return arr


def check_same_length(*arrays, names=None):
    lengths = [len(a) for a in arrays]
    if len(set(lengths)) > 1:
        label = ", ".join(names) if names else "inputs"
        raise LengthMismatch(f"{label} have mismatched lengths {lengths}")
    return lengths[0] if lengths else 0


def check_symmetric(M, name="matrix", tol=1e-9):
    if np.max(np.abs(M - M.T), initial=0.0) > tol * max(1.0, np.max(np.abs(M), initial=0.0)):
        raise ValueError(f"{name} must be symmetric")
    return M
