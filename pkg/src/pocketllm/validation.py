"""Input validation helpers shared across the package."""

import numpy as np


def as_weight_matrix(x, name="W", dtype=np.float64):
    """Coerce to a finite 2-D float matrix or raise ValueError."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_positive_int(value, name):
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_divides(d, d_out):
    """Subvector length must split each row exactly."""
    check_positive_int(d, "subvector length")
    if d_out % d != 0:
        raise ValueError(
            f"subvector length {d} does not divide row width {d_out}"
        )
    return d_out // d
