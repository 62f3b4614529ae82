"""Quantized convolution for training.

The forward pass quantizes through the same numpy functions the inference
side uses, so a trained layer exports to exactly the weights it was trained
with.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..quantize import (
    BINARY,
    SIGNED_BINARY,
    TERNARY,
    QuantizedLayer,
    RegionSpec,
    assign_regions,
    binary_values,
    compute_delta,
    quantize_binary,
    quantize_signed_binary,
    quantize_ternary,
    signed_binary_values,
    ternary_values,
)
from .ede import backward_quant

FULL_PRECISION = "fp"


def to_rsck(weight: torch.Tensor) -> np.ndarray:
    """torch ``[K, C, R, S]`` -> numpy RSCK float32."""
    return weight.detach().cpu().numpy().transpose(2, 3, 1, 0).astype(np.float32)


def from_rsck(arr: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(3, 2, 0, 1))).to(like)


class _QuantizeWeights(torch.autograd.Function):
    @staticmethod
    def forward(ctx, latent, conv):
        W = to_rsck(latent)
        delta = compute_delta(W, conv.delta_coeff)
        if conv.variant == SIGNED_BINARY:
            beta = conv.region_map.beta_tensor(*W.shape[:2])
            q = signed_binary_values(W, beta, delta)
        elif conv.variant == TERNARY:
            beta = None
            q = ternary_values(W, delta)
        else:
            beta = None
            q = binary_values(W)
        ctx.conv = conv
        ctx.W = W
        ctx.beta = beta
        ctx.delta = delta
        conv.last_delta = delta
        return from_rsck(q.astype(np.float32), latent)

    @staticmethod
    def backward(ctx, grad_out):
        conv = ctx.conv
        up = to_rsck(grad_out)
        beta = ctx.beta if ctx.beta is not None else 1
        g = backward_quant(ctx.W, beta, ctx.delta, up, conv.ede_on, conv.schedule,
                           variant=conv.variant)
        return from_rsck(g.astype(np.float32), grad_out), None


class QuantConv2d(nn.Module):
    """Conv layer whose latent weights are quantized on every forward pass.

    ``variant`` is ``"binary"``, ``"ternary"``, ``"signed-binary"`` or
    ``"fp"`` (no quantization). The signed-binary region map is drawn once
    here and never changes afterwards.
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1,
                 variant=SIGNED_BINARY, delta_coeff=0.05, fraction_pos=0.5,
                 c_tile=None, multiplier=1, seed=0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.variant = variant
        self.delta_coeff = delta_coeff
        self.weight = nn.Parameter(
            torch.empty(out_channels, in_channels, kernel_size, kernel_size)
        )
        nn.init.kaiming_normal_(self.weight, mode="fan_out", nonlinearity="relu")
        self.clamp_()
        self.region_map = None
        if variant == SIGNED_BINARY:
            c_t = RegionSpec(c_tile, multiplier).region_channels(in_channels)
            self.region_map = assign_regions(out_channels, in_channels, c_t, fraction_pos, seed)
        self.ede_on = True
        self.schedule = (1.0, 1.0)
        self.last_delta = 0.0

    def quantized_weight(self):
        if self.variant == FULL_PRECISION:
            return self.weight
        return _QuantizeWeights.apply(self.weight, self)

    def forward(self, x):
        return F.conv2d(x, self.quantized_weight(), stride=self.stride, padding=self.padding)

    def export(self) -> QuantizedLayer:
        """Quantized weights as the inference side sees them."""
        W = to_rsck(self.weight)
        delta = compute_delta(W, self.delta_coeff)
        if self.variant == SIGNED_BINARY:
            return quantize_signed_binary(W, self.region_map, delta, self.delta_coeff)
        if self.variant == TERNARY:
            return quantize_ternary(W, delta, self.delta_coeff)
        if self.variant == BINARY:
            return quantize_binary(W)
        raise ValueError("full-precision layer has no quantized form")

    def clamp_(self):
        if self.variant == FULL_PRECISION:
            return
        with torch.no_grad():
            self.weight.clamp_(-1.0, 1.0)

    def extra_repr(self):
        K, C, R, S = self.weight.shape
        return f"{C}, {K}, kernel={R}x{S}, stride={self.stride}, variant={self.variant}"
