"""Shared oracles for the test suite."""

import numpy as np

from repsparse.tensor import naive_conv2d


def conv_rel_error(y, x, weights, spec):
    """Elementwise error of ``y`` against the dense oracle, relative to the
    magnitude of the summed products (``|x| * |w|`` convolved), so outputs
    that cancel to nearly zero are judged on the size of their terms."""
    ref = naive_conv2d(x, weights, spec).astype(np.float64)
    scale = naive_conv2d(np.abs(x), np.abs(weights), spec).astype(np.float64)
    err = np.abs(y.astype(np.float64) - ref)
    return float(np.max(err / np.maximum(scale, 1e-30), initial=0.0))


def laplace_zero_mass(delta, b):
    """P(|X| < delta) for X ~ Laplace(0, b)."""
    return 1.0 - np.exp(-delta / b)
