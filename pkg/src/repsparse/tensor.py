"""Dense tensor plumbing: conv geometry, the naive convolution oracle and
a small binary container for rank-4 float32 tensors.

Activations are NHWC and weights are RSCK throughout the package, so a
channel tile ``[c0, c0 + C*)`` of a filter is a contiguous slice along the
third weight axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._validation import check_activations, check_weights

TENSOR_MAGIC = b"RST4"


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution: ``R x S`` kernel, ``C`` in, ``K`` out."""

    R: int
    S: int
    C: int
    K: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("R", "S", "C", "K", "stride"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ConvSpec.{name} must be a positive integer")
        if self.padding < 0:
            raise ValueError("ConvSpec.padding must be non-negative")

    @classmethod
    def from_weights(cls, weights, stride=1, padding=0) -> "ConvSpec":
        R, S, C, K = np.shape(weights)
        return cls(R, S, C, K, stride, padding)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.R, self.S, self.C, self.K)

    def output_hw(self, H: int, W: int) -> tuple[int, int]:
        Ho = (H + 2 * self.padding - self.R) // self.stride + 1
        Wo = (W + 2 * self.padding - self.S) // self.stride + 1
        if Ho < 1 or Wo < 1:
            raise ValueError(
                f"input {H}x{W} too small for kernel {self.R}x{self.S} "
                f"with padding {self.padding}"
            )
        return Ho, Wo


@dataclass(frozen=True)
class OpCounts:
    additions: int = 0
    subtractions: int = 0
    multiplies: int = 0

    @property
    def total(self) -> int:
        return self.additions + self.subtractions + self.multiplies

    def __add__(self, other: "OpCounts") -> "OpCounts":
        return OpCounts(
            self.additions + other.additions,
            self.subtractions + other.subtractions,
            self.multiplies + other.multiplies,
        )

    def scaled(self, factor: int) -> "OpCounts":
        return OpCounts(
            self.additions * factor, self.subtractions * factor, self.multiplies * factor
        )

    def as_dict(self) -> dict:
        return {
            "additions": self.additions,
            "subtractions": self.subtractions,
            "multiplies": self.multiplies,
            "total": self.total,
        }


def im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Unfold NHWC input into a ``[N*H'*W', R*S*C]`` patch matrix.

    Column ``(r*S + s)*C + c`` holds the activation multiplied by
    ``weights[r, s, c, :]``, which matches ``weights.reshape(-1, K)``.
    """
    x = check_activations(x, spec.C)
    N, H, W, _ = x.shape
    Ho, Wo = spec.output_hw(H, W)
    p = spec.padding
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(x, (spec.R, spec.S), axis=(1, 2))
    # win: [N, H+2p-R+1, W+2p-S+1, C, R, S]
    win = win[:, :: spec.stride, :: spec.stride][:, :Ho, :Wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(N * Ho * Wo, spec.R * spec.S * spec.C)
    return np.ascontiguousarray(cols)


def naive_conv2d(x: np.ndarray, weights: np.ndarray, spec: ConvSpec | None = None) -> np.ndarray:
    """Reference convolution, direct multiply-accumulate in float32.

    Deliberately written as explicit loops over the kernel window so that it
    stays independent of :func:`im2col`, which the plan executor relies on.
    """
    weights = check_weights(weights)
    if spec is None:
        spec = ConvSpec.from_weights(weights)
    if weights.shape != spec.weight_shape:
        raise ValueError(
            f"weights have shape {weights.shape}, spec expects {spec.weight_shape}"
        )
    x = check_activations(x, spec.C)
    N, H, W, _ = x.shape
    Ho, Wo = spec.output_hw(H, W)
    p, st = spec.padding, spec.stride
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    out = np.zeros((N, Ho, Wo, spec.K), dtype=np.float32)
    for r in range(spec.R):
        for s in range(spec.S):
            patch = xp[:, r : r + st * (Ho - 1) + 1 : st, s : s + st * (Wo - 1) + 1 : st, :]
            out += np.tensordot(patch, weights[r, s], axes=([3], [0])).astype(np.float32)
    return out


def count_naive_ops(spec: ConvSpec, out_dims=(1, 1, 1)) -> OpCounts:
    """Multiply/add count of dense convolution, unaware of repetition or zeros.

    ``out_dims`` is ``(N, H', W')``; the default counts a single output pixel.
    """
    N, Ho, Wo = out_dims
    pixels = N * Ho * Wo
    taps = spec.R * spec.S * spec.C
    return OpCounts(
        additions=(taps - 1) * spec.K * pixels,
        multiplies=taps * spec.K * pixels,
    )


def save_tensor(path, array) -> None:
    """Write a rank-4 float32 tensor: magic, four u32 dims, raw LE float32."""
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim > 4:
        raise ValueError("tensor container holds at most 4 dims")
    dims = (1,) * (4 - arr.ndim) + arr.shape
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<4I", *dims))
        fh.write(np.ascontiguousarray(arr).tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a tensor container (bad magic)")
    dims = struct.unpack_from("<4I", raw, 4)
    count = int(np.prod(dims))
    body = raw[20:]
    if len(body) != 4 * count:
        raise ValueError(f"{path}: expected {4 * count} data bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype="<f4").reshape(dims).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: tensor contains non-finite values")
    return arr
