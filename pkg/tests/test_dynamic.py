"""Dynamic encoder: dense-connectivity audits, early-exit evaluation, confidence,
and exit placement."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toclib.channel import ChannelSpec
from toclib.dynamic_model import (
    DynamicConfig,
    build_dynamic,
    build_dynamic_pipeline,
    confidence,
    forward_to_exit,
    place_exits,
)
from toclib.engine import forward
from toclib.errors import NonFiniteError, TocError


def desk_cfg(**over):
    base = dict(num_scales=2, num_exits=3, blocks=6, growth=4, stem_channels=6,
                channel=ChannelSpec("awgn", 12.0), num_classes=4, input_shape=(16, 16, 1))
    base.update(over)
    return DynamicConfig(**base)


def test_config_validation():
    with pytest.raises(TocError):
        desk_cfg(num_exits=1)
    with pytest.raises(TocError):
        desk_cfg(blocks=2)  # fewer blocks than exits
    with pytest.raises(TocError):
        desk_cfg(tau=(1.0, 0.5))
    with pytest.raises(TocError):
        desk_cfg(iota=(1.0, 0.3))  # not a reciprocal integer
    with pytest.raises(TocError):
        desk_cfg(exit_blocks=(1, 1, 6))


def test_dense_growth_channel_count():
    # scale-1 state after l dense layers concatenates c0 + l*g channels
    cfg = desk_cfg()
    g = build_dynamic(cfg, with_exits=False)
    shapes = g.infer_shapes()
    states = g.meta["trunk"]["states"][0]
    for layer, _ in enumerate(states):
        width = sum(shapes[n][-1] for n in states[: layer + 1])
        assert width == cfg.stem_channels + layer * cfg.growth


def test_dense_connectivity_audit():
    # every non-initial layer at scale v consumes all prior same-scale outputs;
    # for v != 1 also all prior previous-scale outputs
    g = build_dynamic(desk_cfg(), with_exits=False)
    states = g.meta["trunk"]["states"]
    for rec in g.meta["trunk"]["dense_layers"]:
        v, layer = rec["scale"], rec["layer"]
        assert rec["same_scale"] == states[v - 1][:layer]
        if v == 1:
            assert rec["prev_scale"] == []
        else:
            assert rec["prev_scale"] == states[v - 2][:layer]
        # the graph wiring matches the audit record
        if v == 1:
            node = g.nodes[f"b{layer}.s1.conv"]
            src = g.nodes[node.inputs[0]]
            consumed = src.inputs if src.spec.kind == "concat" else [src.id]
            assert consumed == rec["same_scale"] or [src.id] == rec["same_scale"]
        else:
            vert = g.nodes[f"b{layer}.s{v}v.conv"]
            vsrc = g.nodes[vert.inputs[0]]
            vconsumed = vsrc.inputs if vsrc.spec.kind == "concat" else [vsrc.id]
            assert vconsumed == rec["prev_scale"] or [vsrc.id] == rec["prev_scale"]
            horiz = g.nodes[f"b{layer}.s{v}h.conv"]
            hsrc = g.nodes[horiz.inputs[0]]
            hconsumed = hsrc.inputs if hsrc.spec.kind == "concat" else [hsrc.id]
            assert hconsumed == rec["same_scale"] or [hsrc.id] == rec["same_scale"]


def test_desk_preset_builds_and_shape_checks():
    g = build_dynamic(desk_cfg())
    g.infer_shapes()
    assert len(g.meta["exits"]) == 3
    for ex in g.meta["exits"]:
        assert g.infer_shapes()[ex["tx"]] == (16,)


def test_forward_to_exit_stays_within_ancestors():
    cfg = desk_cfg()
    pipe = build_dynamic_pipeline(cfg, np.random.default_rng(0))
    g = pipe.graph
    x = np.random.default_rng(1).random((4, 16, 16, 1))
    out, res = forward_to_exit(g, pipe.params, x, 1)
    ex = g.meta["exits"][0]
    allowed = g.ancestors([ex["feature"], ex["conf_logits"]])
    assert set(res.computed) <= allowed


def test_exit_k_equals_full_forward():
    cfg = desk_cfg()
    pipe = build_dynamic_pipeline(cfg, np.random.default_rng(0))
    g = pipe.graph
    x = np.random.default_rng(1).random((4, 16, 16, 1))
    out, _ = forward_to_exit(g, pipe.params, x, 3)
    full = forward(g, pipe.params, x, mode="eval", rng=np.random.default_rng(0))
    ex = g.meta["exits"][2]
    np.testing.assert_array_equal(out.feature, full[ex["feature"]])
    np.testing.assert_array_equal(out.logits, full[ex["conf_logits"]])


def test_incremental_evaluation_recomputes_nothing():
    cfg = desk_cfg()
    pipe = build_dynamic_pipeline(cfg, np.random.default_rng(0))
    x = np.random.default_rng(1).random((4, 16, 16, 1))
    _, res1 = forward_to_exit(pipe.graph, pipe.params, x, 1)
    _, res2 = forward_to_exit(pipe.graph, pipe.params, x, 2, cache=res1)
    _, res3 = forward_to_exit(pipe.graph, pipe.params, x, 3, cache=res2)
    assert not set(res2.computed) & set(res1.computed)
    assert not set(res3.computed) & (set(res1.computed) | set(res2.computed))


def test_exit_index_out_of_range():
    pipe = build_dynamic_pipeline(desk_cfg(), np.random.default_rng(0))
    x = np.zeros((1, 16, 16, 1))
    with pytest.raises(TocError):
        forward_to_exit(pipe.graph, pipe.params, x, 0)
    with pytest.raises(TocError):
        forward_to_exit(pipe.graph, pipe.params, x, 4)


def test_confidence_examples():
    assert confidence(np.zeros(4)) == pytest.approx(0.25)
    assert confidence(np.array([2.0, 0.0])) == pytest.approx(0.880797, abs=1e-6)
    base = np.array([0.3, -1.2, 2.0])
    assert confidence(base + 17.5) == pytest.approx(confidence(base), rel=1e-12)
    with pytest.raises(NonFiniteError):
        confidence(np.array([1.0, np.nan]))
    with pytest.raises(TocError):
        confidence(np.array([1.0]))


def test_confidence_argmax_invariant_under_positive_scaling():
    rng = np.random.default_rng(0)
    for _ in range(50):
        logits = rng.standard_normal(6)
        for c in (0.5, 2.0, 10.0):
            assert np.argmax(logits * c) == np.argmax(logits)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-15, 15), min_size=2, max_size=12))
def test_confidence_bounds(logits):
    # strict upper bound holds while the logit spread stays below the float64
    # saturation point (softmax rounds to exactly 1.0 past a ~36-logit gap)
    m = len(logits)
    phi = confidence(np.array(logits))
    assert 1 / m - 1e-12 <= phi < 1.0
    if len(set(logits)) == 1:
        assert phi == pytest.approx(1 / m)


def test_confidence_saturates_to_one_at_extreme_gaps():
    assert confidence(np.array([100.0, 0.0])) == 1.0


def test_place_exits_examples():
    assert place_exits(np.arange(1, 13), 3).blocks == [4, 8, 12]
    assert place_exits([1, 2, 4, 6, 10, 14], 2).blocks == [4, 6]
    assert place_exits([1, 2, 4, 6], 4).blocks == [1, 2, 3, 4]
    with pytest.raises(TocError):
        place_exits([1, 2, 3], 4)
    with pytest.raises(TocError):
        place_exits([3, 2, 1], 2)


def test_place_exits_reports_deviation():
    p = place_exits(np.arange(1, 13), 3)
    assert p.max_rel_deviation == pytest.approx(0.0)
    q = place_exits([1, 2, 4, 6, 10, 14], 2)
    assert q.max_rel_deviation == pytest.approx(1 / 7)


def test_explicit_exit_blocks_respected():
    cfg = desk_cfg(exit_blocks=(1, 3, 6))
    g = build_dynamic(cfg)
    assert [ex["block"] for ex in g.meta["exits"]] == [1, 3, 6]
    assert g.meta["placement"]["blocks"] == [1, 3, 6]
