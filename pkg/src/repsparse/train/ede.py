"""Surrogate gradients for the weight quantizers.

Two backward rules are available. The straight-through rule scales the
upstream gradient by the region's scale in the band a weight quantizes to a
nonzero value and passes it unchanged elsewhere. The error-decay rule
replaces it by the derivative of ``k * tanh(t * (w - c))``, where ``c`` is
the threshold the weight is closest to crossing (``beta * delta`` for
signed-binary) and ``(t, k)`` follow a geometric schedule from soft to
sharp.
"""

from __future__ import annotations

import math

import numpy as np

T_MIN = 0.1
T_MAX = 10.0


def ede_schedule(i, N, t_min: float = T_MIN, t_max: float = T_MAX) -> tuple[float, float]:
    """Sharpness ``t`` and gain ``k`` at step ``i`` of ``N``."""
    if N <= 0:
        raise ValueError("N must be positive")
    if not 0 <= i <= N:
        raise ValueError(f"i={i} outside [0, {N}]")
    if i == 0:
        t = float(t_min)
    elif i == N:
        t = float(t_max)
    else:
        t = t_min * 10 ** ((i / N) * math.log10(t_max / t_min))
    k = max(1.0 / t, 1.0)
    return t, k


def ede_grad_factor(w, beta, delta, t, k):
    """``k t (1 - tanh^2(t (w - beta*delta)))``, elementwise."""
    if np.any(np.asarray(t) <= 0):
        raise ValueError("t must be positive")
    th = np.tanh(t * (np.asarray(w, dtype=np.float64) - beta * delta))
    return k * t * (1.0 - th * th)


def ste_grad(w, upstream, beta, delta, alpha_pos=1.0, alpha_neg=-1.0):
    """Straight-through gradient with the region scale in the active band."""
    w = np.asarray(w)
    upstream = np.asarray(upstream)
    active_pos = (w > delta) & (np.asarray(beta) > 0)
    active_neg = (w < -delta) & (np.asarray(beta) < 0)
    factor = np.where(active_pos, alpha_pos, np.where(active_neg, -alpha_neg, 1.0))
    return factor * upstream


def surrogate_center(variant: str, w, beta, delta):
    """Threshold the error-decay surrogate is centered on."""
    if variant == "signed-binary":
        return np.asarray(beta) * delta
    if variant == "ternary":
        return np.where(np.asarray(w) >= 0, delta, -delta)
    return np.zeros_like(np.asarray(w, dtype=np.float64))


def backward_quant(latent, beta, delta, upstream, ede_on: bool, schedule=None,
                   variant: str = "signed-binary"):
    """Gradient w.r.t. latent weights given the gradient w.r.t. quantized ones.

    ``beta`` broadcasts against ``latent`` (ignored for binary/ternary,
    where the straight-through rule is a plain pass-through).
    ``schedule`` is the current ``(t, k)``.
    """
    latent = np.asarray(latent)
    upstream = np.asarray(upstream)
    if latent.shape != upstream.shape:
        raise ValueError(f"latent {latent.shape} and upstream {upstream.shape} differ")
    if ede_on:
        if schedule is None:
            raise ValueError("error-decay gradient needs the current (t, k)")
        t, k = schedule
        center = surrogate_center(variant, latent, beta, delta)
        th = np.tanh(t * (latent.astype(np.float64) - center))
        return (upstream * (k * t * (1.0 - th * th))).astype(upstream.dtype)
    if variant == "signed-binary":
        return ste_grad(latent, upstream, beta, delta).astype(upstream.dtype)
    return upstream.copy()
