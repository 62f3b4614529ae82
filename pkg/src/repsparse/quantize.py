"""Binary, ternary and signed-binary weight quantizers.

Signed-binary quantization splits every filter into regions of
``R x S x C_t`` weights. Each region gets a fixed sign factor ``beta`` and
maps its latent weights to ``{0, +1}`` (beta = +1) or ``{0, -1}``
(beta = -1), so a region holds at most two distinct values while the layer
as a whole is ternary. Which regions are positive is drawn once, before
training, by :func:`assign_regions`.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_fraction, check_positive_int, check_weights

BINARY = "binary"
TERNARY = "ternary"
SIGNED_BINARY = "signed-binary"
VARIANTS = (BINARY, TERNARY, SIGNED_BINARY)

_MASK64 = (1 << 64) - 1


class XorShift64Star:
    """xorshift64* generator seeded through one splitmix64 step.

    Kept explicit (rather than numpy's bit generators) so region maps can be
    regenerated bit-for-bit by any other implementation:

        state = splitmix64(seed), or 1 if that is 0
        next:  x ^= x >> 12; x ^= x << 25; x ^= x >> 27
               return x * 0x2545F4914F6CDD1D   (mod 2**64)
        below(n): draw until r < 2**64 - (2**64 % n), return r % n
    """

    def __init__(self, seed: int):
        z = (int(seed) + 0x9E3779B97F4A7C15) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        z ^= z >> 31
        self.state = z or 1

    def next(self) -> int:
        x = self.state
        x ^= x >> 12
        x = (x ^ (x << 25)) & _MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & _MASK64

    def below(self, n: int) -> int:
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next()
            if r < limit:
                return r % n

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``, last index first."""
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


@dataclass(frozen=True)
class RegionSpec:
    """Channel extent of a signed-binary region.

    ``c_tile`` is the inference tile size C* along C and ``multiplier`` the
    positive integer k; a region spans ``C_t = min(C, k * C*)`` channels.
    ``c_tile=None`` means whole filters (C_t = C, the inter-filter variant).
    """

    c_tile: int | None = None
    multiplier: int = 1

    def __post_init__(self):
        check_positive_int(self.multiplier, "multiplier")
        if self.c_tile is not None:
            check_positive_int(self.c_tile, "c_tile")

    def region_channels(self, C: int) -> int:
        if self.c_tile is None:
            return C
        c_t = min(C, self.multiplier * self.c_tile)
        if C % c_t:
            raise ValueError(f"region size C_t={c_t} does not divide C={C}")
        return c_t


@dataclass(frozen=True)
class QuantScheme:
    variant: str = SIGNED_BINARY
    delta_coeff: float = 0.05
    region: RegionSpec | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not self.delta_coeff > 0:
            raise ValueError("delta_coeff must be positive")


@dataclass(frozen=True, eq=False)
class RegionMap:
    """Sign factor per (filter, channel-region), filter-major.

    ``assignments[k, t]`` is the beta of channels ``[t*c_tile, (t+1)*c_tile)``
    of filter ``k``.
    """

    assignments: np.ndarray
    c_tile: int
    fraction_pos: float
    seed: int

    def __post_init__(self):
        a = np.array(self.assignments, dtype=np.int8)
        if a.ndim != 2 or not np.isin(a, (-1, 1)).all():
            raise ValueError("assignments must be a [K, tiles] array of +1/-1")
        a.setflags(write=False)
        object.__setattr__(self, "assignments", a)

    @property
    def K(self) -> int:
        return self.assignments.shape[0]

    @property
    def n_tiles(self) -> int:
        return self.assignments.shape[1]

    @property
    def C(self) -> int:
        return self.n_tiles * self.c_tile

    @property
    def per_filter(self) -> bool:
        return self.n_tiles == 1

    def channel_betas(self) -> np.ndarray:
        """``[C, K]`` array of beta per input channel and filter."""
        return np.repeat(self.assignments.T, self.c_tile, axis=0)

    def beta_tensor(self, R: int, S: int) -> np.ndarray:
        return np.broadcast_to(self.channel_betas(), (R, S, self.C, self.K))

    def digest(self) -> str:
        h = hashlib.sha256(self.assignments.tobytes())
        h.update(f"{self.c_tile}:{self.fraction_pos}:{self.seed}".encode())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, RegionMap):
            return NotImplemented
        return (
            self.c_tile == other.c_tile
            and self.seed == other.seed
            and np.float32(self.fraction_pos) == np.float32(other.fraction_pos)
            and np.array_equal(self.assignments, other.assignments)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class QuantizedLayer:
    """Quantized RSCK weights in ``{-1, 0, +1}`` plus how they were made.

    ``scales`` holds (alpha_+1, alpha_-1); dequantized weights put alpha_+1
    where the value is +1 and alpha_-1 where it is -1.
    """

    values: np.ndarray
    scheme: QuantScheme
    delta: float = 0.0
    region_map: RegionMap | None = None
    scales: tuple[float, float] = (1.0, -1.0)
    _checked: bool = field(default=False, repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.int8)
        if v.ndim != 4:
            raise ValueError("values must be RSCK")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "delta", float(np.float32(self.delta)))
        if self.scheme.variant == BINARY and (v == 0).any():
            raise ValueError("binary layer cannot contain zeros")
        if self.scheme.variant == SIGNED_BINARY:
            if self.region_map is None:
                raise ValueError("signed-binary layer needs a region map")
            beta = self.region_map.beta_tensor(*v.shape[:2])
            if ((v != 0) & (v != beta)).any():
                raise ValueError("value sign disagrees with its region's beta")

    @property
    def shape(self):
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, QuantizedLayer):
            return NotImplemented
        # delta_coeff only records how delta was chosen; the layer is defined
        # by its values, delta and region map
        return (
            self.scheme.variant == other.scheme.variant
            and self.delta == other.delta
            and tuple(self.scales) == tuple(other.scales)
            and self.region_map == other.region_map
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def compute_delta(W, coeff: float = 0.05) -> float:
    """Threshold ``coeff * max|W|``; zero for an all-zero tensor."""
    W = np.asarray(W, dtype=np.float32)
    if W.size == 0:
        raise ValueError("cannot compute a threshold for an empty tensor")
    return float(np.float32(coeff) * np.abs(W).max())


def binary_values(W: np.ndarray) -> np.ndarray:
    # sign(0) = +1
    return np.where(W >= 0, 1, -1).astype(np.int8)


def ternary_values(W: np.ndarray, delta: float) -> np.ndarray:
    return ((W > delta).astype(np.int8) - (W < -delta).astype(np.int8)).astype(np.int8)


def signed_binary_values(W: np.ndarray, beta: np.ndarray, delta: float) -> np.ndarray:
    """Region-wise {0, beta} quantization; ``beta`` broadcasts against ``W``.

    The extra ``W != 0`` guard only matters when delta is 0 (all-zero W),
    keeping the degenerate layer all zero instead of all beta.
    """
    pos = (W >= delta) & (W > 0)
    neg = (W <= -delta) & (W < 0)
    return np.where(beta > 0, pos, -neg.astype(np.int8)).astype(np.int8)


def quantize_binary(W) -> QuantizedLayer:
    W = check_weights(W)
    return QuantizedLayer(binary_values(W), QuantScheme(BINARY))


def quantize_ternary(W, delta: float, delta_coeff: float = 0.05) -> QuantizedLayer:
    W = check_weights(W)
    if delta < 0:
        raise ValueError("delta must be non-negative")
    return QuantizedLayer(
        ternary_values(W, delta), QuantScheme(TERNARY, delta_coeff), delta=delta
    )


def quantize_signed_binary(
    W, region_map: RegionMap, delta: float, delta_coeff: float = 0.05
) -> QuantizedLayer:
    W = check_weights(W)
    R, S, C, K = W.shape
    if region_map.K != K or region_map.C != C:
        raise ValueError(
            f"region map covers K={region_map.K}, C={region_map.C}; weights are C={C}, K={K}"
        )
    beta = region_map.beta_tensor(R, S)
    region = RegionSpec(None if region_map.per_filter else region_map.c_tile)
    scheme = QuantScheme(SIGNED_BINARY, delta_coeff, region)
    return QuantizedLayer(
        signed_binary_values(W, beta, delta), scheme, delta=delta, region_map=region_map
    )


def assign_regions(K: int, C: int, c_tile: int | None, P: float, seed: int) -> RegionMap:
    """Draw which (filter, region) pairs use the {0, +1} quantizer.

    Exactly ``round(P * regions)`` regions (halves rounded up) get
    beta = +1. With whole-filter regions ``K * P`` must already be an
    integer. The positive regions are the first ones of a Fisher-Yates
    permutation of the filter-major region indices.
    """
    check_positive_int(K, "K")
    check_positive_int(C, "C")
    P = check_fraction(P, "P")
    c_tile = C if c_tile is None else check_positive_int(c_tile, "c_tile")
    if C % c_tile:
        raise ValueError(f"region size {c_tile} does not divide C={C}")
    n_tiles = C // c_tile
    count = K * n_tiles
    exact = P * count
    n_pos = math.floor(exact + 0.5)
    if n_tiles == 1 and abs(exact - n_pos) > 1e-9:
        raise ValueError(f"K*P = {exact:g} is not an integer")
    order = XorShift64Star(seed).permutation(count)
    flat = np.full(count, -1, dtype=np.int8)
    flat[order[:n_pos]] = 1
    return RegionMap(flat.reshape(K, n_tiles), c_tile, P, int(seed))


def dequantize(layer: QuantizedLayer) -> np.ndarray:
    a_pos, a_neg = layer.scales
    v = layer.values
    return np.where(v > 0, a_pos, np.where(v < 0, a_neg, 0.0)).astype(np.float32)


def density(layer) -> float:
    values = layer.values if isinstance(layer, QuantizedLayer) else np.asarray(layer)
    if values.size == 0:
        return 0.0
    return float(np.count_nonzero(values)) / values.size


def unique_values_per_filter(layer) -> np.ndarray:
    values = layer.values if isinstance(layer, QuantizedLayer) else np.asarray(layer)
    flat = values.reshape(-1, values.shape[-1])
    return np.array([np.unique(flat[:, k]).size for k in range(flat.shape[1])])


def unique_2d_filters(layer) -> int:
    """Number of distinct R x S kernels over all (channel, filter) pairs."""
    values = layer.values if isinstance(layer, QuantizedLayer) else np.asarray(layer)
    R, S, C, K = values.shape
    kernels = values.transpose(2, 3, 0, 1).reshape(C * K, R * S)
    return int(np.unique(kernels, axis=0).shape[0])


class _BaseQuantizer(TransformerMixin, BaseEstimator):
    """fit() records the layer geometry and threshold; transform() returns
    dequantized float32 weights so the quantizer drops into pipelines."""

    def _check_shape(self, W):
        W = check_weights(W)
        if W.shape != self.weight_shape_:
            raise ValueError(f"fitted on shape {self.weight_shape_}, got {W.shape}")
        return W

    def transform(self, W):
        return dequantize(self.quantize(W))


class BinaryQuantizer(_BaseQuantizer):
    def fit(self, W, y=None):
        self.weight_shape_ = check_weights(W).shape
        return self

    def quantize(self, W) -> QuantizedLayer:
        check_is_fitted(self)
        return quantize_binary(self._check_shape(W))


class TernaryQuantizer(_BaseQuantizer):
    def __init__(self, delta_coeff=0.05):
        self.delta_coeff = delta_coeff

    def fit(self, W, y=None):
        W = check_weights(W)
        self.weight_shape_ = W.shape
        self.delta_ = compute_delta(W, self.delta_coeff)
        return self

    def quantize(self, W) -> QuantizedLayer:
        check_is_fitted(self)
        return quantize_ternary(self._check_shape(W), self.delta_, self.delta_coeff)


class SignedBinaryQuantizer(_BaseQuantizer):
    """Signed-binary quantizer with a region map drawn at fit time.

    Parameters
    ----------
    delta_coeff : float
        Threshold is ``delta_coeff * max|W|`` of the fitted weights.
    fraction_pos : float
        Share of regions quantized to {0, +1}.
    c_tile, multiplier : int or None
        Region extent along C, ``min(C, multiplier * c_tile)``; ``None``
        gives one region per filter.
    seed : int
        Seed of the region draw.
    """

    def __init__(self, delta_coeff=0.05, fraction_pos=0.5, c_tile=None, multiplier=1, seed=0):
        self.delta_coeff = delta_coeff
        self.fraction_pos = fraction_pos
        self.c_tile = c_tile
        self.multiplier = multiplier
        self.seed = seed

    def fit(self, W, y=None):
        W = check_weights(W)
        R, S, C, K = W.shape
        c_t = RegionSpec(self.c_tile, self.multiplier).region_channels(C)
        self.weight_shape_ = W.shape
        self.region_map_ = assign_regions(K, C, c_t, self.fraction_pos, self.seed)
        self.delta_ = compute_delta(W, self.delta_coeff)
        return self

    def quantize(self, W) -> QuantizedLayer:
        check_is_fitted(self)
        return quantize_signed_binary(
            self._check_shape(W), self.region_map_, self.delta_, self.delta_coeff
        )


def make_quantizer(variant: str, **params):
    if variant == BINARY:
        return BinaryQuantizer()
    if variant == TERNARY:
        return TernaryQuantizer(delta_coeff=params.get("delta_coeff", 0.05))
    if variant == SIGNED_BINARY:
        return SignedBinaryQuantizer(**params)
    raise ValueError(f"unknown variant {variant!r}")
