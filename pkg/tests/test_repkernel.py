import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import conv_rel_error
from repsparse.quantize import (
    QuantizedLayer,
    QuantScheme,
    assign_regions,
    compute_delta,
    dequantize,
    quantize_signed_binary,
)
from repsparse.repkernel import (
    ACCUMULATE,
    GATHER_SUM,
    OUTPUT,
    RepetitionConv2D,
    arithmetic_reduction,
    build_plan,
    execute_plan,
    sweep_sparsity,
    synthetic_layer,
)
from repsparse.tensor import ConvSpec, count_naive_ops, naive_conv2d


def taps(*w):
    return np.asarray(w, np.float32).reshape(1, len(w), 1, 1)


def test_worked_example_counts():
    # a(w + y + z) + b(x): two gather adds, one accumulate add, two multiplies
    ops = build_plan(taps(2, 3, 2, 2)).op_counts
    assert (ops.additions, ops.subtractions, ops.multiplies) == (3, 0, 2)
    assert ops.total == 5


def test_worked_example_with_zero_weight():
    ops = build_plan(taps(2, 0, 2, 2), sparsity_support=True).op_counts
    assert (ops.additions, ops.multiplies) == (2, 1)
    # without sparsity support the zero group is summed and multiplied by 0
    off = build_plan(taps(2, 0, 2, 2), sparsity_support=False).op_counts
    assert (off.additions, off.multiplies) == (3, 2)


def test_worked_example_executes():
    x = np.array([1, 1, 1, 1], np.float32).reshape(1, 1, 4, 1)
    assert execute_plan(build_plan(taps(2, 3, 2, 2)), x).item() == 9.0
    x = np.array([1, 2, 3, 4], np.float32).reshape(1, 1, 4, 1)
    assert execute_plan(build_plan(taps(2, 3, 2, 2)), x).item() == 2 * (1 + 3 + 4) + 3 * 2


@pytest.mark.parametrize("factoring", ["tree", "tile"])
def test_identical_filters_share_all_gathers(factoring):
    rng = np.random.default_rng(0)
    f = np.where(rng.random((3, 3, 8, 1)) < 0.5, 1.0, -1.0).astype(np.float32)
    one = build_plan(f, factoring=factoring)
    two = build_plan(np.concatenate([f, f], axis=3), factoring=factoring)
    assert two.n_gather == one.n_gather
    assert two.n_combine == one.n_combine
    # the second filter adds no gather work, only its own output accumulate
    terms = np.diff(two.out_indptr)[1]
    assert two.op_counts.total - one.op_counts.total == terms - 1


def test_negated_filter_is_shared_in_tree_mode():
    f = np.where(np.random.default_rng(1).random((3, 3, 4, 1)) < 0.5, 1.0, -1.0)
    one = build_plan(f.astype(np.float32))
    pair = build_plan(np.concatenate([f, -f], axis=3).astype(np.float32))
    assert pair.op_counts.total == one.op_counts.total


def test_identity_plan():
    x = np.random.default_rng(2).standard_normal((1, 4, 5, 1)).astype(np.float32)
    np.testing.assert_array_equal(execute_plan(build_plan(np.ones((1, 1, 1, 1), np.float32)), x), x)


def test_random_signed_binary_layer_matches_oracle():
    rng = np.random.default_rng(3)
    W = rng.standard_normal((3, 3, 16, 8)).astype(np.float32)
    rmap = assign_regions(8, 16, None, 0.5, 3)
    layer = quantize_signed_binary(W, rmap, compute_delta(W, 0.3))
    spec = ConvSpec(3, 3, 16, 8, padding=1)
    x = rng.standard_normal((1, 8, 8, 16)).astype(np.float32)
    for sparsity in (True, False):
        y = execute_plan(build_plan(layer, spec, sparsity), x)
        assert conv_rel_error(y, x, dequantize(layer), spec) < 1e-5


def test_sparsity_flag_changes_ops_not_results():
    rng = np.random.default_rng(4)
    layer = synthetic_layer((3, 3, 16, 16), "ternary", 0.5, 4)
    spec = ConvSpec(3, 3, 16, 16)
    x = rng.standard_normal((1, 6, 6, 16)).astype(np.float32)
    on, off = build_plan(layer, spec, True), build_plan(layer, spec, False)
    assert on.op_counts.total < off.op_counts.total
    scale = naive_conv2d(np.abs(x), np.abs(dequantize(layer)), spec)
    diff = np.abs(execute_plan(on, x) - execute_plan(off, x))
    assert np.all(diff <= 1e-6 * np.maximum(scale, 1e-6))


@settings(max_examples=60, deadline=None)
@given(
    r=st.sampled_from([1, 3]), s=st.sampled_from([1, 3]), c=st.sampled_from([4, 16, 64]),
    k=st.sampled_from([4, 16, 64]), variant=st.sampled_from(["binary", "ternary", "signed-binary"]),
    sparsity_support=st.booleans(), factoring=st.sampled_from(["tree", "tile"]),
    level=st.floats(0, 1), stride=st.sampled_from([1, 2]), seed=st.integers(0, 2**16),
)
def test_plan_matches_oracle(r, s, c, k, variant, sparsity_support, factoring, level, stride,
                             seed):
    rng = np.random.default_rng(seed)
    layer = synthetic_layer((r, s, c, k), variant, level, seed)
    spec = ConvSpec(r, s, c, k, stride, r // 2)
    x = rng.standard_normal((1, 7, 6, c)).astype(np.float32)
    y = execute_plan(build_plan(layer, spec, sparsity_support, factoring=factoring), x)
    assert conv_rel_error(y, x, dequantize(layer), spec) < 1e-5


def test_real_valued_weights_match_oracle():
    rng = np.random.default_rng(5)
    W = rng.integers(-3, 4, (3, 3, 8, 6)).astype(np.float32) * 0.5
    spec = ConvSpec(3, 3, 8, 6, padding=1)
    x = rng.standard_normal((2, 5, 5, 8)).astype(np.float32)
    for flag in (True, False):
        for factoring in ("tree", "tile"):
            y = execute_plan(build_plan(W, spec, flag, factoring=factoring), x)
            assert conv_rel_error(y, x, W, spec) < 1e-5


def _reachable_offsets(plan):
    """Activation offsets feeding each output filter, by walking the DAG."""
    nodes = plan.nodes
    memo = {}

    def leaves(i):
        if i in memo:
            return memo[i]
        n = nodes[i]
        if n.kind == GATHER_SUM:
            out = {o for o, _ in n.operands}
        elif n.kind == ACCUMULATE:
            out = set().union(*(leaves(ref) for ref, _ in n.operands))
        else:
            out = leaves(n.operands[0]) if n.operands else set()
        memo[i] = out
        return out

    return {n.param: leaves(i) for i, n in enumerate(nodes) if n.kind == OUTPUT}


@pytest.mark.parametrize("factoring", ["tree", "tile"])
def test_sparse_plans_never_gather_zero_weights(factoring):
    layer = synthetic_layer((3, 3, 8, 6), "ternary", 0.6, 6)
    flat = layer.values.reshape(-1, 6)
    on = _reachable_offsets(build_plan(layer, sparsity_support=True, factoring=factoring))
    off = _reachable_offsets(build_plan(layer, sparsity_support=False, factoring=factoring))
    for k in range(6):
        assert on[k] == set(np.nonzero(flat[:, k])[0].tolist())
        assert off[k] == set(range(flat.shape[0]))


@pytest.mark.parametrize("tile", [2, 4])
def test_every_partial_sum_stays_in_one_sign_region(tile):
    rng = np.random.default_rng(7)
    W = rng.standard_normal((3, 3, 16, 8)).astype(np.float32)
    rmap = assign_regions(8, 16, 4, 0.5, 7)
    layer = quantize_signed_binary(W, rmap, compute_delta(W))
    for factoring in ("tree", "tile"):
        plan = build_plan(layer, tile_size=tile, factoring=factoring)
        nodes = plan.nodes
        region = {}
        for i, n in enumerate(nodes):
            if n.kind == GATHER_SUM:
                region[i] = {(o % 16) // 4 for o, _ in n.operands}
            elif n.kind == ACCUMULATE and i < plan.n_nodes:
                region[i] = set().union(*(region[r] for r, _ in n.operands))
            if i in region:
                assert len(region[i]) == 1


def test_tile_crossing_sign_regions_is_rejected():
    W = np.random.default_rng(8).standard_normal((3, 3, 16, 4)).astype(np.float32)
    layer = quantize_signed_binary(W, assign_regions(4, 16, 4, 0.5, 0), 0.1)
    with pytest.raises(ValueError, match="crosses"):
        build_plan(layer, tile_size=8)
    with pytest.raises(ValueError, match="divide"):
        build_plan(layer, tile_size=3)
    with pytest.raises(ValueError, match="factoring"):
        build_plan(layer, factoring="greedy")


def test_monolithic_filters_at_zero_sparsity():
    layer = synthetic_layer((3, 3, 64, 64), "signed-binary", 0.0, 0)
    plan = build_plan(layer)
    # every filter is +-(sum of all taps): one shared reduction of 576 terms
    assert plan.op_counts.total == 3 * 3 * 64 - 1
    assert arithmetic_reduction(plan) == count_naive_ops(plan.spec).total / 575


def test_all_zero_layer():
    layer = synthetic_layer((3, 3, 4, 4), "ternary", 1.0, 0)
    plan = build_plan(layer)
    assert plan.op_counts.total == 0
    assert arithmetic_reduction(plan) == count_naive_ops(plan.spec).total
    x = np.ones((1, 3, 3, 4), np.float32)
    assert not execute_plan(plan, x).any()
    assert build_plan(layer, sparsity_support=False).op_counts.multiplies == 1


@pytest.mark.parametrize("factoring", ["tree", "tile"])
def test_single_filter_ops_monotone_in_sparsity(factoring):
    # with one filter there is no cross-filter sharing to lose, so pruning
    # more weights can only remove work
    rng = np.random.default_rng(9)
    W = rng.uniform(-1, 1, (3, 3, 32, 1)).astype(np.float32)
    rmap = assign_regions(1, 32, None, 1.0, 0)
    prev = None
    for d in np.linspace(0, 1, 21):
        q = quantize_signed_binary(W, rmap, d)
        total = build_plan(q, factoring=factoring).op_counts.total
        if prev is not None:
            assert total <= prev
        prev = total


@pytest.mark.parametrize("shape", [(3, 3, 16, 16), (3, 3, 64, 64), (1, 1, 64, 64)])
def test_signed_binary_never_costs_more_than_ternary(shape):
    for seed in range(2):
        for s in (0.1, 0.3, 0.5, 0.65, 0.8, 0.9):
            t = build_plan(synthetic_layer(shape, "ternary", s, seed)).op_counts.total
            sb = build_plan(synthetic_layer(shape, "signed-binary", s, seed)).op_counts.total
            assert sb <= t


def test_synthetic_layers_have_requested_sparsity():
    for variant in ("ternary", "signed-binary"):
        q = synthetic_layer((3, 3, 64, 64), variant, 0.65, 1)
        assert abs((q.values == 0).mean() - 0.65) < 0.01
    sb = synthetic_layer((1, 1, 4, 8), "signed-binary", 0.0, 0)
    assert (sb.region_map.assignments == 1).sum() == 4


def test_sweep_binary_constant_and_ordering():
    rows = sweep_sparsity((3, 3, 32, 32), sparsity_grid=[0, 0.3, 0.6, 0.9, 1.0])
    by = {}
    for r in rows:
        by.setdefault(r["scheme"], []).append(r["reduction"])
    assert len(set(by["binary"])) == 1
    assert all(sb >= t for sb, t in zip(by["signed-binary"], by["ternary"]))
    assert by["ternary"][0] == by["binary"][0]
    with pytest.raises(ValueError):
        sweep_sparsity((1, 1, 4, 4), sparsity_grid=[1.5])


def test_plan_is_deterministic():
    layer = synthetic_layer((3, 3, 16, 16), "signed-binary", 0.5, 3)
    a, b = build_plan(layer), build_plan(layer)
    assert a.op_counts == b.op_counts
    for name in ("gather_offsets", "combine_left", "combine_right", "combine_rel", "out_terms"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert a.to_json() == b.to_json()


def test_plan_dumps():
    plan = build_plan(taps(2, 3, 2, 2))
    text = plan.to_text()
    assert "GatherSum" in text and "Scale 2" in text and "total=5" in text
    doc = json.loads(plan.to_json())
    assert doc["op_counts"] == {"additions": 3, "subtractions": 0, "multiplies": 2, "total": 5}
    kinds = [n["kind"] for n in doc["nodes"]]
    assert kinds.count("Output") == 1
    # topological: operands always point backwards
    for n in doc["nodes"]:
        for op in n["operands"]:
            ref = op[0] if isinstance(op, list) else op
            if n["kind"] != "GatherSum":
                assert ref < n["id"]


def test_all_negative_output_uses_negate():
    for w in [(-1, -1, 0, -1), (-1, -2, 0, -1)]:
        plan = build_plan(taps(*w))
        assert "Negate" in [n.kind for n in plan.nodes]
        assert plan.op_counts.subtractions == (1 if w[1] == -2 else 0)
    x = np.array([1, 2, 3, 4], np.float32).reshape(1, 1, 4, 1)
    assert execute_plan(plan, x).item() == -(1 + 4 + 2 * 2)


def test_estimator_api():
    rng = np.random.default_rng(10)
    layer = synthetic_layer((3, 3, 8, 4), "signed-binary", 0.5, 10)
    est = RepetitionConv2D(padding=1, stride=2).fit(layer)
    x = rng.standard_normal((1, 9, 9, 8)).astype(np.float32)
    spec = ConvSpec(3, 3, 8, 4, 2, 1)
    assert conv_rel_error(est.transform(x), x, dequantize(layer), spec) < 1e-5
    assert est.get_params()["sparsity_support"] is True
    assert est.reduction_ > 1
    with pytest.raises(ValueError, match="channels"):
        est.transform(np.zeros((1, 9, 9, 3), np.float32))


def test_scaled_layers_use_multiplies():
    vals = np.array([1, -1, 0, 1], np.int8).reshape(1, 4, 1, 1)
    rmap = assign_regions(1, 1, None, 1.0, 0)
    q = QuantizedLayer(np.abs(vals), QuantScheme("signed-binary"), region_map=rmap,
                       scales=(0.5, -0.5))
    ops = build_plan(q).op_counts
    assert ops.multiplies == 1
