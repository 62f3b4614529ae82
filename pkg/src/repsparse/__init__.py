"""Signed-binary quantization and repetition/sparsity-aware convolution."""

from .packing import PackedModel, load_packed, pack, save_packed, unpack
from .quantize import (
    BinaryQuantizer,
    QuantizedLayer,
    QuantScheme,
    RegionMap,
    RegionSpec,
    SignedBinaryQuantizer,
    TernaryQuantizer,
    assign_regions,
    compute_delta,
    density,
    dequantize,
    quantize_binary,
    quantize_signed_binary,
    quantize_ternary,
)
from .repkernel import (
    PlanNode,
    RepetitionConv2D,
    RepetitionPlan,
    arithmetic_reduction,
    build_plan,
    execute_plan,
    sweep_sparsity,
    synthetic_layer,
)
from .tensor import ConvSpec, OpCounts, count_naive_ops, load_tensor, naive_conv2d, save_tensor

__version__ = "0.1.0"

__all__ = [
    "BinaryQuantizer",
    "ConvSpec",
    "OpCounts",
    "PackedModel",
    "PlanNode",
    "QuantScheme",
    "QuantizedLayer",
    "RegionMap",
    "RegionSpec",
    "RepetitionConv2D",
    "RepetitionPlan",
    "SignedBinaryQuantizer",
    "TernaryQuantizer",
    "arithmetic_reduction",
    "assign_regions",
    "build_plan",
    "compute_delta",
    "count_naive_ops",
    "density",
    "dequantize",
    "execute_plan",
    "load_packed",
    "load_tensor",
    "naive_conv2d",
    "pack",
    "quantize_binary",
    "quantize_signed_binary",
    "quantize_ternary",
    "save_packed",
    "save_tensor",
    "sweep_sparsity",
    "synthetic_layer",
    "unpack",
]
