"""Repetition- and sparsity-aware convolution plans.

A plan computes one output pixel of every filter from the ``R*S*C`` patch
activations. Weights are split into channel tiles; inside a tile the
positions sharing a weight magnitude are summed first (signs folded into
add/subtract) and multiplied once by that magnitude. Partial sums are built
by a balanced pairwise tree over tile positions and every tree node is
hash-consed across filters up to a global sign, so two filters whose tiles
agree on a block of positions (or agree after negation) share that block's
additions. With ``factoring="tile"`` a whole per-value group is one flat
gather, shared only between identical groups.

Cost model, per output pixel:

* GatherSum of m offsets: m - 1 additions
* Accumulate of j signed terms: j - 1 additions/subtractions
* Negate: free (folded into a subtraction)
* Scale by +-1: free; by 0: one multiply, present only when sparsity
  support is off; by anything else: one multiply
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_activations, check_weights
from .quantize import (
    BINARY,
    SIGNED_BINARY,
    TERNARY,
    QuantizedLayer,
    QuantScheme,
    assign_regions,
    dequantize,
)
from .tensor import ConvSpec, OpCounts, count_naive_ops, im2col

GATHER_SUM = "GatherSum"
NEGATE = "Negate"
SCALE = "Scale"
ACCUMULATE = "Accumulate"
OUTPUT = "Output"

FACTORINGS = ("tree", "tile")

# budget for the [nodes, pixels] scratch buffer used by execute_plan
_EXEC_BYTES = 1 << 26
_ID_MASK = (1 << 31) - 1


@dataclass(frozen=True)
class PlanNode:
    kind: str
    operands: tuple = ()
    param: float | int | None = None


@dataclass(eq=False)
class RepetitionPlan:
    """Flat, array-backed plan. Node ids are topologically ordered:
    gathers, then tree combinations level by level, then scales.

    ``combine_*`` rows are ``node = left + rel * right``. Each level in
    ``levels`` is ``(start, mid, end)`` over the combination rows, adds in
    ``[start, mid)`` and subtractions in ``[mid, end)``. Output ``k`` is the
    signed sum of ``out_terms[out_indptr[k]:out_indptr[k+1]]``.
    """

    spec: ConvSpec
    sparsity_support: bool
    tile_size: int
    factoring: str
    op_counts: OpCounts
    gather_indptr: np.ndarray
    gather_offsets: np.ndarray
    gather_signs: np.ndarray
    combine_left: np.ndarray
    combine_right: np.ndarray
    combine_rel: np.ndarray
    levels: list
    scale_src: np.ndarray
    scale_alpha: np.ndarray
    out_indptr: np.ndarray
    out_terms: np.ndarray
    out_signs: np.ndarray
    _nodes: list | None = field(default=None, repr=False)

    @property
    def n_gather(self) -> int:
        return len(self.gather_indptr) - 1

    @property
    def n_combine(self) -> int:
        return len(self.combine_left)

    @property
    def n_nodes(self) -> int:
        return self.n_gather + self.n_combine + len(self.scale_src)

    @property
    def nodes(self) -> list[PlanNode]:
        if self._nodes is None:
            self._nodes = _materialize(self)
        return self._nodes

    def to_text(self) -> str:
        lines = [
            f"plan {self.spec.weight_shape} tile={self.tile_size} "
            f"sparsity={'on' if self.sparsity_support else 'off'} factoring={self.factoring}",
            "ops " + " ".join(f"{k}={v}" for k, v in self.op_counts.as_dict().items()),
        ]
        for i, node in enumerate(self.nodes):
            if node.kind == GATHER_SUM:
                body = " ".join(f"{'+' if s > 0 else '-'}x{o}" for o, s in node.operands)
            elif node.kind == ACCUMULATE:
                body = " ".join(f"{'+' if s > 0 else '-'}n{r}" for r, s in node.operands)
            elif node.kind == SCALE:
                body = f"{node.param:g} * n{node.operands[0]}"
            elif node.kind == NEGATE:
                body = f"-n{node.operands[0]}"
            else:
                body = f"filter {node.param} <- n{node.operands[0]}" if node.operands else (
                    f"filter {node.param} <- 0"
                )
            lines.append(f"n{i} {node.kind} {body}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        nodes = [
            {"id": i, "kind": n.kind, "operands": [list(o) if isinstance(o, tuple) else o
                                                    for o in n.operands], "param": n.param}
            for i, n in enumerate(self.nodes)
        ]
        return json.dumps(
            {
                "spec": self.spec.__dict__,
                "sparsity_support": self.sparsity_support,
                "tile_size": self.tile_size,
                "factoring": self.factoring,
                "op_counts": self.op_counts.as_dict(),
                "nodes": nodes,
            }
        )


def _materialize(plan: RepetitionPlan) -> list[PlanNode]:
    nodes = []
    ip = plan.gather_indptr
    for g in range(plan.n_gather):
        offs = plan.gather_offsets[ip[g] : ip[g + 1]]
        sg = plan.gather_signs[ip[g] : ip[g + 1]]
        nodes.append(PlanNode(GATHER_SUM, tuple((int(o), int(s)) for o, s in zip(offs, sg))))
    for l, r, rel in zip(plan.combine_left, plan.combine_right, plan.combine_rel):
        nodes.append(PlanNode(ACCUMULATE, ((int(l), 1), (int(r), int(rel)))))
    for src, alpha in zip(plan.scale_src, plan.scale_alpha):
        nodes.append(PlanNode(SCALE, (int(src),), float(alpha)))
    for k in range(plan.spec.K):
        lo, hi = plan.out_indptr[k], plan.out_indptr[k + 1]
        terms = [(int(t), int(s)) for t, s in zip(plan.out_terms[lo:hi], plan.out_signs[lo:hi])]
        if not terms:
            nodes.append(PlanNode(OUTPUT, (), k))
            continue
        terms.sort(key=lambda ts: -ts[1])
        if terms[0][1] < 0:
            nodes.append(PlanNode(NEGATE, (terms[0][0],)))
            terms[0] = (len(nodes) - 1, 1)
        nodes.append(PlanNode(ACCUMULATE, tuple(terms)))
        nodes.append(PlanNode(OUTPUT, (len(nodes) - 1,), k))
    return nodes


def _as_weights(layer) -> tuple[np.ndarray, QuantizedLayer | None]:
    if isinstance(layer, QuantizedLayer):
        return dequantize(layer), layer
    return check_weights(layer), None


def _resolve_tile(layer: QuantizedLayer | None, C: int, tile_size) -> int:
    region_c = C
    if layer is not None and layer.scheme.variant == SIGNED_BINARY:
        region_c = layer.region_map.c_tile
    if tile_size is None:
        tile_size = region_c
    tile_size = int(tile_size)
    if tile_size < 1 or C % tile_size:
        raise ValueError(f"tile_size {tile_size} must be positive and divide C={C}")
    if layer is not None and layer.scheme.variant == SIGNED_BINARY and region_c % tile_size:
        raise ValueError(
            f"tile of {tile_size} channels crosses a sign region of {region_c} channels; "
            "each tile must see a single signed-binary quantizer"
        )
    return tile_size


def build_plan(
    layer,
    spec: ConvSpec | None = None,
    sparsity_support: bool = True,
    tile_size: int | None = None,
    factoring: str = "tree",
) -> RepetitionPlan:
    """Build a plan for a quantized layer or for raw RSCK weights.

    Raw weights are taken at face value, so any real-valued filter (such as
    ``[2, 3, 2, 2]``) can be planned; quantized layers are dequantized first.
    """
    if factoring not in FACTORINGS:
        raise ValueError(f"factoring must be one of {FACTORINGS}")
    W, qlayer = _as_weights(layer)
    if spec is None:
        spec = ConvSpec.from_weights(W)
    if W.shape != spec.weight_shape:
        raise ValueError(f"weights have shape {W.shape}, spec expects {spec.weight_shape}")
    R, S, C, K = W.shape
    tile = _resolve_tile(qlayer, C, tile_size)
    n_tiles = C // tile
    L = R * S * tile

    flat = W.reshape(R * S * C, K)
    offset, k = np.nonzero(flat) if sparsity_support else np.indices(flat.shape).reshape(2, -1)
    vals = flat[offset, k]
    rs, c = np.divmod(offset, C)
    t, cl = np.divmod(c, tile)
    pos = rs * tile + cl

    if factoring == "tree":
        cls_val = np.abs(vals)
        sign = np.where(vals < 0, -1, 1).astype(np.int8)
    else:
        cls_val = vals
        sign = np.ones(len(vals), dtype=np.int8)
    uniq_cls, cls_id = np.unique(cls_val, return_inverse=True)
    row_key = (k.astype(np.int64) * n_tiles + t) * len(uniq_cls) + cls_id
    rows, row_of = np.unique(row_key, return_inverse=True)
    order = np.lexsort((pos, row_of))
    row_of, pos, offset, sign = row_of[order], pos[order], offset[order], sign[order]
    row_cls = uniq_cls[rows % len(uniq_cls)]
    row_filter = rows // (len(uniq_cls) * n_tiles)

    if factoring == "tree":
        g = _build_tree(row_of, pos, offset, sign, L, len(rows))
    else:
        g = _build_flat(row_of, offset, len(rows))
    root, root_sign = g["root"], g["root_sign"]

    # scale each row's partial sum by its class value (magnitude in tree mode)
    n_base = g["n_nodes"]
    multiplies = 0
    scale_src, scale_alpha = [], []
    term = root.copy()
    term_sign = root_sign.astype(np.int8)
    if factoring == "tile":
        term_sign = np.where(row_cls < 0, -1, 1).astype(np.int8)
    mag = np.abs(row_cls)
    need = mag != 1
    if need.any():
        key = np.stack([root[need], mag[need].view(np.int32).astype(np.int64)], axis=1)
        ukey, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
        inv = inv.reshape(-1)
        scale_src = ukey[:, 0]
        scale_alpha = mag[need][first]
        term[need] = n_base + inv
        # zero-valued rows only exist with sparsity support off, where their
        # Scale(0) is a real multiply
        multiplies = len(scale_src)
    scale_src = np.asarray(scale_src, dtype=np.int64)
    scale_alpha = np.asarray(scale_alpha, dtype=np.float32)

    # zero-class rows only exist when sparsity support is off; they still
    # feed the accumulation (their product is 0, but it is computed)
    out_counts = np.bincount(row_filter, minlength=K)
    out_indptr = np.concatenate([[0], np.cumsum(out_counts)])
    adds, subs = g["adds"], g["subs"]
    npos = np.bincount(row_filter, weights=(term_sign > 0), minlength=K).astype(np.int64)
    nneg = out_counts - npos
    has_pos = npos > 0
    adds += int(np.sum(np.maximum(npos[has_pos] - 1, 0)))
    subs += int(np.sum(nneg[has_pos]))
    subs += int(np.sum(np.maximum(nneg[~has_pos] - 1, 0)))

    return RepetitionPlan(
        spec=spec,
        sparsity_support=bool(sparsity_support),
        tile_size=tile,
        factoring=factoring,
        op_counts=OpCounts(adds, subs, multiplies),
        gather_indptr=g["gather_indptr"],
        gather_offsets=g["gather_offsets"],
        gather_signs=g["gather_signs"],
        combine_left=g["combine_left"],
        combine_right=g["combine_right"],
        combine_rel=g["combine_rel"],
        levels=g["levels"],
        scale_src=scale_src,
        scale_alpha=scale_alpha,
        out_indptr=out_indptr,
        out_terms=term,
        out_signs=term_sign,
    )


def _build_tree(row, pos, offset, sign, L, n_rows) -> dict:
    """Pairwise hash-consed reduction of each row's signed entries.

    Entries are sorted by (row, pos). A leaf is the single activation at
    ``offset``; at each level the entries of blocks ``2b`` and ``2b+1`` of a
    row merge into one node ``left + rel * right`` keyed by its children, so
    equal keys anywhere in the layer are computed once.
    """
    leaf_offsets, nid = np.unique(offset, return_inverse=True)
    nid = nid.astype(np.int64)
    sgn = sign.astype(np.int8)
    blk = pos.astype(np.int64)
    row = row.astype(np.int64)
    next_id = len(leaf_offsets)
    lefts, rights, rels, levels = [], [], [], []
    n_combined = 0
    adds = subs = 0
    depth = max(1, math.ceil(math.log2(L))) if L > 1 else 0
    for _ in range(depth):
        parent = blk >> 1
        key = row * (L + 1) + parent
        pair = np.zeros(len(key), dtype=bool)
        if len(key) > 1:
            pair[:-1] = key[:-1] == key[1:]
        li = np.nonzero(pair)[0]
        if len(li):
            ri = li + 1
            rel = sgn[li] * sgn[ri]
            # adds sort before subtractions so each level runs as two slices
            code = ((rel < 0).astype(np.int64) << 62) | (nid[li] << 31) | nid[ri]
            uk, inv = np.unique(code, return_inverse=True)
            inv = inv.reshape(-1)
            left = (uk >> 31) & _ID_MASK
            right = uk & _ID_MASK
            urel = np.where(uk >> 62, -1, 1).astype(np.int8)
            n_add = int(np.count_nonzero(urel > 0))
            levels.append((n_combined, n_combined + n_add, n_combined + len(uk)))
            lefts.append(left)
            rights.append(right)
            rels.append(urel)
            adds += n_add
            subs += len(uk) - n_add
            nid[li] = next_id + inv
            next_id += len(uk)
            if next_id > _ID_MASK:
                raise ValueError("layer too large for 31-bit plan node ids")
            n_combined += len(uk)
            keep = np.ones(len(key), dtype=bool)
            keep[ri] = False
            row, nid, sgn, parent = row[keep], nid[keep], sgn[keep], parent[keep]
        blk = parent
    if len(row) != n_rows:
        raise AssertionError("tree reduction left more than one node per row")
    n_leaf = len(leaf_offsets)
    return {
        "gather_indptr": np.arange(n_leaf + 1, dtype=np.int64),
        "gather_offsets": leaf_offsets.astype(np.int64),
        "gather_signs": np.ones(n_leaf, dtype=np.int8),
        "combine_left": np.concatenate(lefts) if lefts else np.zeros(0, np.int64),
        "combine_right": np.concatenate(rights) if rights else np.zeros(0, np.int64),
        "combine_rel": np.concatenate(rels) if rels else np.zeros(0, np.int8),
        "levels": levels,
        "root": nid,
        "root_sign": sgn,
        "n_nodes": next_id,
        "adds": adds,
        "subs": subs,
    }


def _build_flat(row, offset, n_rows) -> dict:
    """One GatherSum per row, shared between rows with identical offsets."""
    bounds = np.searchsorted(row, np.arange(n_rows + 1))
    seen: dict[bytes, int] = {}
    indptr, offs = [0], []
    root = np.empty(n_rows, dtype=np.int64)
    adds = 0
    for r in range(n_rows):
        o = offset[bounds[r] : bounds[r + 1]]
        sig = o.tobytes()
        gid = seen.get(sig)
        if gid is None:
            gid = seen[sig] = len(seen)
            offs.append(o)
            indptr.append(indptr[-1] + len(o))
            adds += len(o) - 1
        root[r] = gid
    n = len(seen)
    return {
        "gather_indptr": np.asarray(indptr, dtype=np.int64),
        "gather_offsets": np.concatenate(offs).astype(np.int64) if offs else np.zeros(0, np.int64),
        "gather_signs": np.ones(indptr[-1], dtype=np.int8),
        "combine_left": np.zeros(0, np.int64),
        "combine_right": np.zeros(0, np.int64),
        "combine_rel": np.zeros(0, np.int8),
        "levels": [],
        "root": root,
        "root_sign": np.ones(n_rows, dtype=np.int8),
        "n_nodes": n,
        "adds": adds,
        "subs": 0,
    }


def execute_plan(plan: RepetitionPlan, x) -> np.ndarray:
    """Run ``plan`` on NHWC input; returns ``[N, H', W', K]`` float32."""
    spec = plan.spec
    x = check_activations(x, spec.C)
    N, H, W, _ = x.shape
    Ho, Wo = spec.output_hw(H, W)
    cols = im2col(x, spec)
    P = cols.shape[0]
    out = np.zeros((P, spec.K), dtype=np.float32)
    n_nodes = max(plan.n_nodes, 1)
    chunk = int(max(1, min(P, _EXEC_BYTES // (4 * n_nodes))))
    vals = np.empty((n_nodes, chunk), dtype=np.float32)
    ng, nc = plan.n_gather, plan.n_combine
    ip = plan.gather_indptr
    single = ng == len(plan.gather_offsets)
    nonempty = np.nonzero(np.diff(plan.out_indptr))[0]
    starts = plan.out_indptr[nonempty]
    signs = plan.out_signs.astype(np.float32)[:, None]
    negative = plan.out_signs < 0
    for p0 in range(0, P, chunk):
        p1 = min(P, p0 + chunk)
        w = p1 - p0
        v = vals[:, :w]
        colsT = cols[p0:p1].T
        if single:
            v[:ng] = colsT[plan.gather_offsets]
        elif ng:
            g = colsT[plan.gather_offsets]
            v[:ng] = np.add.reduceat(g, ip[:-1], axis=0)
        for start, mid, end in plan.levels:
            a, b = ng + start, ng + end
            np.add(v[plan.combine_left[start:mid]], v[plan.combine_right[start:mid]],
                   out=v[a : ng + mid])
            np.subtract(v[plan.combine_left[mid:end]], v[plan.combine_right[mid:end]],
                        out=v[ng + mid : b])
        if len(plan.scale_src):
            v[ng + nc :] = v[plan.scale_src] * plan.scale_alpha[:, None]
        if len(plan.out_terms):
            terms = v[plan.out_terms]
            if negative.any():
                terms *= signs
            out[p0:p1, nonempty] = np.add.reduceat(terms, starts, axis=0).T
    return out.reshape(N, Ho, Wo, spec.K)


def arithmetic_reduction(
    layer, spec=None, sparsity_support=True, tile_size=None, factoring="tree"
) -> float:
    plan = layer if isinstance(layer, RepetitionPlan) else build_plan(
        layer, spec, sparsity_support, tile_size, factoring
    )
    return count_naive_ops(plan.spec).total / max(plan.op_counts.total, 1)


def synthetic_layer(shape, variant: str, sparsity: float, seed: int = 0) -> QuantizedLayer:
    """Quantized layer from uniform(-1, 1) weights at an exact sparsity level.

    Ternary and signed-binary share one magnitude mask (``|W| >= sparsity``)
    so both carry the same true sparsity; signed-binary takes half its
    filters positive and half negative. Binary is ``sign(W)``.
    """
    R, S, C, K = shape
    rng = np.random.default_rng(seed)
    W = rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)
    if variant == BINARY:
        return QuantizedLayer(np.where(W >= 0, 1, -1), QuantScheme(BINARY))
    keep = np.abs(W) >= sparsity
    if variant == TERNARY:
        return QuantizedLayer(np.sign(W) * keep, QuantScheme(TERNARY), delta=sparsity)
    if variant == SIGNED_BINARY:
        rmap = assign_regions(K, C, None, 0.5 if K % 2 == 0 else round(K / 2) / K, seed)
        beta = rmap.beta_tensor(R, S)
        return QuantizedLayer(beta * keep, QuantScheme(SIGNED_BINARY), delta=sparsity,
                              region_map=rmap)
    raise ValueError(f"unknown variant {variant!r}")


def sweep_sparsity(
    shape=(3, 3, 512, 512),
    schemes=(BINARY, TERNARY, SIGNED_BINARY),
    sparsity_grid=tuple(i / 10 for i in range(11)),
    seed: int = 0,
    sparsity_support: bool = True,
    factoring: str = "tree",
) -> list[dict]:
    """Arithmetic reduction against sparsity for synthetic layers."""
    spec = ConvSpec(*shape)
    naive = count_naive_ops(spec).total
    grid = [float(s) for s in sparsity_grid]
    if any(not 0.0 <= s <= 1.0 for s in grid):
        raise ValueError("sparsity grid must lie in [0, 1]")
    rows = []
    for scheme in schemes:
        binary_ops = None
        for s in grid:
            if scheme == BINARY and binary_ops is not None:
                ops = binary_ops
            else:
                layer = synthetic_layer(shape, scheme, s, seed)
                ops = build_plan(layer, spec, sparsity_support, factoring=factoring).op_counts
                if scheme == BINARY:
                    binary_ops = ops
            rows.append(
                {
                    "scheme": scheme,
                    "sparsity": s,
                    "plan_ops": ops.total,
                    "naive_ops": naive,
                    "reduction": naive / max(ops.total, 1),
                }
            )
    return rows


class RepetitionConv2D(TransformerMixin, BaseEstimator):
    """Convolution executed through a repetition/sparsity-aware plan.

    ``fit`` takes a :class:`QuantizedLayer` (or raw RSCK weights) and builds
    the plan; ``transform`` maps NHWC activations to NHWC outputs.
    """

    def __init__(self, sparsity_support=True, tile_size=None, factoring="tree",
                 stride=1, padding=0):
        self.sparsity_support = sparsity_support
        self.tile_size = tile_size
        self.factoring = factoring
        self.stride = stride
        self.padding = padding

    def fit(self, layer, y=None):
        shape = layer.shape if isinstance(layer, QuantizedLayer) else np.shape(layer)
        spec = ConvSpec(*shape, stride=self.stride, padding=self.padding)
        self.plan_ = build_plan(layer, spec, self.sparsity_support, self.tile_size,
                                self.factoring)
        self.op_counts_ = self.plan_.op_counts
        self.reduction_ = arithmetic_reduction(self.plan_)
        return self

    def transform(self, x):
        check_is_fitted(self)
        return execute_plan(self.plan_, x)
