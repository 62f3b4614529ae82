"""Bit-packed storage for inter-filter signed-binary layers.

A layer with one sign factor per filter needs one bit per weight (the
effectual bitmap) plus one bit per filter (its beta). File layout, all
little-endian:

    offset  size  field
    0       4     magic b"PLUM"
    4       1     format version (1)
    5       16    R, S, C, K as u32
    21      4     delta as f32
    25      4     fraction of +1 filters as f32
    29      8     region seed as u64
    37      ...   K sign bits (1 = beta +1) followed directly by the R*S*C*K
                  bitmap bits in RSCK row-major order, LSB-first, zero
                  padded to a whole byte once at the end
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .quantize import (
    SIGNED_BINARY,
    QuantizedLayer,
    QuantScheme,
    RegionMap,
    RegionSpec,
)

PACK_MAGIC = b"PLUM"
PACK_VERSION = 1
_HEADER = struct.Struct("<4sB4IffQ")
HEADER_SIZE = _HEADER.size


@dataclass(frozen=True)
class PackedModel:
    dims: tuple[int, int, int, int]
    delta: float
    fraction_pos: float
    seed: int
    payload: bytes
    delta_coeff: float = 0.05

    @property
    def payload_bits(self) -> int:
        R, S, C, K = self.dims
        return R * S * C * K + K

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(
            PACK_MAGIC, PACK_VERSION, *self.dims, self.delta, self.fraction_pos, self.seed
        )
        return header + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PackedModel":
        if len(raw) < HEADER_SIZE:
            raise ValueError("packed model truncated: header incomplete")
        magic, version, R, S, C, K, delta, frac, seed = _HEADER.unpack_from(raw)
        if magic != PACK_MAGIC:
            raise ValueError("not a packed model (bad magic)")
        if version != PACK_VERSION:
            raise ValueError(f"unsupported packed model version {version}")
        if min(R, S, C, K) < 1:
            raise ValueError("packed model has a zero dimension")
        expected = -(-(R * S * C * K + K) // 8)
        payload = raw[HEADER_SIZE:]
        if len(payload) != expected:
            raise ValueError(
                f"packed model payload is {len(payload)} bytes, expected {expected}"
            )
        return cls((R, S, C, K), delta, frac, seed, payload)


def pack(layer: QuantizedLayer) -> PackedModel:
    if layer.scheme.variant != SIGNED_BINARY:
        raise ValueError(
            f"only signed-binary layers can be packed, got {layer.scheme.variant}: "
            "binary has no zero state and ternary needs two bits per weight"
        )
    rmap = layer.region_map
    if not rmap.per_filter:
        raise ValueError("packing needs one region per filter (C_t = C)")
    signs = rmap.assignments[:, 0] > 0
    bitmap = layer.values.reshape(-1) != 0
    bits = np.concatenate([signs, bitmap])
    payload = np.packbits(bits, bitorder="little").tobytes()
    return PackedModel(
        tuple(int(d) for d in layer.shape),
        layer.delta,
        float(np.float32(rmap.fraction_pos)),
        int(rmap.seed),
        payload,
        layer.scheme.delta_coeff,
    )


def unpack(packed: PackedModel) -> QuantizedLayer:
    R, S, C, K = packed.dims
    bits = np.unpackbits(
        np.frombuffer(packed.payload, dtype=np.uint8), bitorder="little", count=packed.payload_bits
    ).astype(bool)
    beta = np.where(bits[:K], 1, -1).astype(np.int8)
    bitmap = bits[K:].reshape(R, S, C, K)
    rmap = RegionMap(beta[:, None], C, packed.fraction_pos, packed.seed)
    values = (bitmap * beta[None, None, None, :]).astype(np.int8)
    return QuantizedLayer(
        values,
        QuantScheme(SIGNED_BINARY, packed.delta_coeff, RegionSpec()),
        delta=packed.delta,
        region_map=rmap,
    )


def save_packed(path, layer: QuantizedLayer) -> PackedModel:
    packed = pack(layer)
    Path(path).write_bytes(packed.to_bytes())
    return packed


def load_packed(path) -> QuantizedLayer:
    return unpack(PackedModel.from_bytes(Path(path).read_bytes()))
