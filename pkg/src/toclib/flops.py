"""Analytical FLOPs accounting.

One multiply-accumulate counts as 2 FLOPs. A conv layer costs
2 * c_in * c_out * k^2 * h_out * w_out, a linear layer 2 * d_in * d_out.
Dense-block convs tagged with a ``bottleneck`` width factor are charged for
min(c_in, factor * c_out) effective input channels.

Two conventions: "conv-linear" charges convolutional and linear layers only
(the usual simplification); "all" also charges normalization (4/element),
ReLU (1/element), pooling (1 per input element), softmax (5/element),
elementwise add (1/element per extra operand), power normalization
(4/element), and bias additions. These constants are fixed so that reports
are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GraphError, TocError
from .network import NetworkGraph

CONVENTIONS = ("conv-linear", "all")


def conv_flops(c_in: int, c_out: int, kernel: int, h_out: int, w_out: int) -> int:
    """2 * c_in * c_out * kernel^2 * h_out * w_out."""
    for name, v in (("c_in", c_in), ("c_out", c_out), ("kernel", kernel), ("h_out", h_out), ("w_out", w_out)):
        if v < 1:
            raise TocError(f"conv_flops: {name} must be >= 1, got {v}")
    return 2 * c_in * c_out * kernel * kernel * h_out * w_out


def linear_flops(d_in: int, d_out: int) -> int:
    """2 * d_in * d_out."""
    if d_in < 1 or d_out < 1:
        raise TocError(f"linear_flops: dimensions must be >= 1, got ({d_in}, {d_out})")
    return 2 * d_in * d_out


def bottleneck_in_channels(c_in: int, c_out: int, factor: float) -> int:
    """Effective input channels under a bottleneck of the given width factor."""
    return int(min(c_in, factor * c_out))


def _numel(shape) -> int:
    return int(np.prod(shape))


def _node_flops(node, in_shapes, out_shape, convention: str) -> int:
    kind = node.spec.kind
    a = node.spec.attrs
    total = 0
    if kind in ("conv", "strided-conv"):
        c_in = in_shapes[0][-1]
        ho, wo, c_out = out_shape
        if "bottleneck" in a:
            c_in = bottleneck_in_channels(c_in, c_out, a["bottleneck"])
        total = conv_flops(c_in, c_out, a["kernel"], ho, wo)
        if convention == "all":
            total += _numel(out_shape)  # bias adds
    elif kind == "linear":
        total = linear_flops(in_shapes[0][0], out_shape[0])
        if convention == "all":
            total += out_shape[0]
    elif convention == "all":
        if kind in ("batch-norm", "layer-norm"):
            total = 4 * _numel(out_shape)
        elif kind == "relu":
            total = _numel(out_shape)
        elif kind in ("avg-pool", "global-pool"):
            total = _numel(in_shapes[0])
        elif kind == "softmax":
            total = 5 * _numel(out_shape)
        elif kind == "power-normalize":
            total = 4 * _numel(out_shape)
        elif kind == "add":
            total = (len(in_shapes) - 1) * _numel(out_shape)
        # input, concat, channel: free
    return total


@dataclass
class FlopsProfile:
    """Per-layer and per-exit computation costs of one graph, per sample."""

    by_node: dict[str, int]
    exit_costs: list[int]
    exit_costs_e2e: list[int]
    receiver_costs: list[int]
    total: int
    convention: str
    scales: dict[str, int | None] = field(default_factory=dict)

    @property
    def flops_min(self) -> int:
        return self.exit_costs[0]

    @property
    def flops_max(self) -> int:
        return self.exit_costs[-1]

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"id": nid, "scale": self.scales.get(nid), "flops": f} for nid, f in self.by_node.items()
            ],
            "exits": list(self.exit_costs),
            "exits_end_to_end": list(self.exit_costs_e2e),
            "receiver": list(self.receiver_costs),
            "total": self.total,
            "convention": self.convention,
        }


def profile_graph(graph: NetworkGraph, convention: str = "conv-linear") -> FlopsProfile:
    """Exact per-layer tally plus cumulative transmitter cost through each exit.

    The transmitter cost of exit k covers every ancestor of its transmit point
    plus the confidence heads of exits 1..k (the sequential exit test evaluates
    all of them); the channel, decoder, and receiver head are excluded and
    reported separately.
    """
    if convention not in CONVENTIONS:
        raise TocError(f"unknown convention {convention!r}; expected one of {CONVENTIONS}")
    shapes = graph.infer_shapes()
    by_node: dict[str, int] = {}
    scales: dict[str, int | None] = {}
    for nid in graph.order:
        node = graph.nodes[nid]
        in_shapes = [shapes[i] for i in node.inputs]
        by_node[nid] = _node_flops(node, in_shapes, shapes[nid], convention)
        scales[nid] = node.spec.attrs.get("scale")
    total = sum(by_node.values())

    exit_costs: list[int] = []
    exit_costs_e2e: list[int] = []
    receiver_costs: list[int] = []
    exits = graph.meta.get("exits", [])
    conf_nodes: list[str] = []
    for ex in exits:
        if ex.get("conf_logits"):
            conf_nodes.append(ex["conf_logits"])
        targets = [ex["tx"]] + list(conf_nodes)
        tx_set = graph.ancestors(targets)
        c_k = sum(by_node[n] for n in tx_set)
        exit_costs.append(c_k)
        if "zhat" in ex:
            full = graph.ancestors([ex["zhat"]] + targets)
            rx = sum(by_node[n] for n in full - tx_set)
        else:
            rx = 0
        receiver_costs.append(rx)
        exit_costs_e2e.append(c_k + rx)

    if exit_costs and any(b <= a for a, b in zip(exit_costs, exit_costs[1:])):
        raise GraphError(f"exit costs are not strictly increasing: {exit_costs}")
    return FlopsProfile(by_node, exit_costs, exit_costs_e2e, receiver_costs, total, convention, scales)
