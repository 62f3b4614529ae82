"""Input checks shared by the estimators and the functional API."""

import numpy as np


def check_weights(weights, *, allow_empty=False) -> np.ndarray:
    """Return ``weights`` as a finite float32 RSCK array or raise."""
    arr = np.asarray(weights, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"expected RSCK weights with 4 dims, got shape {arr.shape}")
    if arr.size == 0 and not allow_empty:
        raise ValueError("weight tensor is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError("weight tensor contains NaN or Inf")
    return arr


def check_activations(x, channels=None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected NHWC activations, got shape {arr.shape}")
    if channels is not None and arr.shape[3] != channels:
        raise ValueError(
            f"activations have {arr.shape[3]} channels, convolution expects {channels}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError("activations contain NaN or Inf")
    return arr


def check_fraction(p, name="fraction_pos") -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {p}")
    return p


def check_positive_int(value, name) -> int:
    if int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
