"""FLOPs meter against an independent hand-count oracle."""

import numpy as np
import pytest

from toclib.channel import ChannelSpec
from toclib.dynamic_model import DynamicConfig, build_dynamic
from toclib.errors import TocError
from toclib.flops import bottleneck_in_channels, conv_flops, linear_flops, profile_graph
from toclib.network import NetworkGraph


def test_conv_flops_examples():
    assert conv_flops(3, 8, 3, 32, 32) == 442_368
    assert conv_flops(1, 1, 1, 1, 1) == 2
    assert conv_flops(64, 32, 1, 8, 8) == 262_144
    with pytest.raises(TocError):
        conv_flops(0, 8, 3, 32, 32)


def test_bottleneck_examples():
    assert bottleneck_in_channels(64, 8, 4) == 32
    assert bottleneck_in_channels(16, 8, 4) == 16
    assert bottleneck_in_channels(64, 16, 4) == 64


def test_linear_flops_examples():
    assert linear_flops(64, 128) == 16_384
    assert linear_flops(1, 1) == 2
    # channel encoder fed from a width-64 feature: 2*64*128 + 2*128*16
    assert linear_flops(64, 128) + linear_flops(128, 16) == 20_480


# -- independent hand-count oracle -------------------------------------------
# The oracle works from explicit layer dimension lists, never from the graph
# walker it is checking.


def hand_count(layers):
    total = 0
    for layer in layers:
        kind = layer[0]
        if kind == "conv":
            _, c_in, c_out, k, ho, wo, bott = layer
            if bott is not None:
                c_in = min(c_in, int(bott * c_out))
            total += 2 * c_in * c_out * k * k * ho * wo
        elif kind == "linear":
            _, d_in, d_out = layer
            total += 2 * d_in * d_out
    return total


def test_profile_matches_hand_count_on_three_toy_graphs():
    # graph 1: plain conv stack
    g1 = NetworkGraph((8, 8, 3))
    g1.add("c1", "conv", "input", out_channels=6, kernel=3)
    g1.add("r1", "relu", "c1")
    g1.add("c2", "strided-conv", "r1", out_channels=12, kernel=3, stride=2)
    g1.add("gp", "global-pool", "c2")
    g1.add("fc", "linear", "gp", units=5)
    oracle1 = hand_count([
        ("conv", 3, 6, 3, 8, 8, None),
        ("conv", 6, 12, 3, 4, 4, None),
        ("linear", 12, 5),
    ])
    assert profile_graph(g1).total == oracle1

    # graph 2: bottleneck rule binds on the fat concat input
    g2 = NetworkGraph((8, 8, 4))
    g2.add("a", "conv", "input", out_channels=20, kernel=3)
    g2.add("b", "conv", "input", out_channels=20, kernel=3)
    g2.add("cat", "concat", ["a", "b"])                       # 40 channels
    g2.add("dense", "conv", "cat", out_channels=4, kernel=3, bottleneck=4.0)
    oracle2 = hand_count([
        ("conv", 4, 20, 3, 8, 8, None),
        ("conv", 4, 20, 3, 8, 8, None),
        ("conv", 40, 4, 3, 8, 8, 4.0),   # min(40, 16) = 16 effective input channels
    ])
    assert profile_graph(g2).total == oracle2
    assert profile_graph(g2).by_node["dense"] == 2 * 16 * 4 * 9 * 64

    # graph 3: scale ladder with kernel-1 projections and a pool
    g3 = NetworkGraph((16, 16, 2))
    g3.add("s1", "conv", "input", out_channels=8, kernel=3)
    g3.add("p", "avg-pool", "s1", kernel=2)
    g3.add("s2", "conv", "p", out_channels=16, kernel=1, pad=0)
    g3.add("gp", "global-pool", "s2")
    g3.add("h1", "linear", "gp", units=128)
    g3.add("h2", "linear", "h1", units=16)
    oracle3 = hand_count([
        ("conv", 2, 8, 3, 16, 16, None),
        ("conv", 8, 16, 1, 8, 8, None),
        ("linear", 16, 128),
        ("linear", 128, 16),
    ])
    assert profile_graph(g3).total == oracle3


def test_empty_graph_counts_zero():
    g = NetworkGraph((4, 4, 1))
    assert profile_graph(g).total == 0


def test_doubling_spatial_size_quadruples_conv_cost():
    def conv_total(side):
        g = NetworkGraph((side, side, 3))
        g.add("c", "conv", "input", out_channels=8, kernel=3)
        return profile_graph(g).total

    assert conv_total(32) == 4 * conv_total(16)


def test_additivity_over_layer_partition():
    g = NetworkGraph((8, 8, 3))
    g.add("c1", "conv", "input", out_channels=6, kernel=3)
    g.add("c2", "conv", "c1", out_channels=12, kernel=3)
    prof = profile_graph(g)
    assert prof.total == prof.by_node["c1"] + prof.by_node["c2"]

    g_first = NetworkGraph((8, 8, 3))
    g_first.add("c1", "conv", "input", out_channels=6, kernel=3)
    g_second = NetworkGraph((8, 8, 6))
    g_second.add("c2", "conv", "input", out_channels=12, kernel=3)
    assert prof.total == profile_graph(g_first).total + profile_graph(g_second).total


def test_all_convention_dominates_conv_linear():
    for seed in range(3):
        cfg = DynamicConfig(num_exits=2, blocks=2 + seed, channel=ChannelSpec("noiseless"))
        g = build_dynamic(cfg)
        assert profile_graph(g, "all").total >= profile_graph(g, "conv-linear").total
        a = profile_graph(g, "all").exit_costs
        c = profile_graph(g, "conv-linear").exit_costs
        assert all(x >= y for x, y in zip(a, c))


def test_unknown_convention_rejected():
    g = NetworkGraph((4, 4, 1))
    with pytest.raises(TocError):
        profile_graph(g, "vibes")


def test_scale_recursion_tau_sq_iota_sq():
    # layer (v, l) has channels scaled by tau and spatial size by iota relative
    # to layer (v-1, l-1): conv cost ratio must be exactly tau^2 * iota^2.
    tau, iota = 2, 0.5
    g = NetworkGraph((16, 16, 4))
    g.add("lvl1", "conv", "input", out_channels=8, kernel=3)          # 4 -> 8 at 16x16
    g.add("down", "strided-conv", "lvl1", out_channels=8, kernel=1, stride=2, pad=0)
    g.add("lvl2", "conv", "down", out_channels=16, kernel=3)          # 8 -> 16 at 8x8
    prof = profile_graph(g)
    ratio = prof.by_node["lvl2"] / prof.by_node["lvl1"]
    assert ratio == pytest.approx((tau * iota) ** 2)


def test_exit_costs_strictly_increasing_and_min_max():
    cfg = DynamicConfig(channel=ChannelSpec("awgn", 6.0))
    g = build_dynamic(cfg)
    prof = profile_graph(g)
    assert len(prof.exit_costs) == cfg.num_exits
    assert all(b > a for a, b in zip(prof.exit_costs, prof.exit_costs[1:]))
    assert prof.flops_min == prof.exit_costs[0]
    assert prof.flops_max == prof.exit_costs[-1]
    assert all(e == c + r for e, c, r in zip(prof.exit_costs_e2e, prof.exit_costs, prof.receiver_costs))


def test_adding_trunk_layers_never_decreases_exit_cost():
    def exit1_cost(blocks):
        cfg = DynamicConfig(num_exits=2, blocks=blocks, channel=ChannelSpec("noiseless"))
        return profile_graph(build_dynamic(cfg)).exit_costs[0]

    costs = [exit1_cost(b) for b in (2, 4, 6)]
    assert costs[0] <= costs[1] <= costs[2]


def test_profile_json_shape():
    cfg = DynamicConfig(num_exits=2, blocks=3, channel=ChannelSpec("noiseless"))
    d = profile_graph(build_dynamic(cfg)).to_dict()
    assert set(d) >= {"layers", "exits", "total", "convention"}
    assert all(set(row) == {"id", "scale", "flops"} for row in d["layers"])
    assert len(d["exits"]) == 2
