"""Multi-exit, multi-scale, densely connected dynamic encoder.

The trunk is a lattice of feature scales: within a scale every dense layer
convolves the concatenation of all earlier same-scale features; at coarser
scales the layer additionally concatenates a strided convolution over all
earlier features of the previous scale. Exit k taps the coarsest-scale state
after a chosen block and owns a transmitter confidence head, a channel codec
pair, and a receiver head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelSpec, add_channel_decoder, add_channel_encoder
from .engine import ForwardResult, ParameterSet, forward, init_params
from .errors import NonFiniteError, TocError
from .flops import profile_graph
from .network import NetworkGraph


@dataclass
class DynamicConfig:
    input_shape: tuple[int, int, int] = (16, 16, 1)   # (H, W, C)
    num_classes: int = 4
    num_scales: int = 2
    num_exits: int = 3
    blocks: int = 6                      # dense layers in the trunk
    growth: int = 4                      # channels added per dense layer at scale 1
    stem_channels: int = 6
    tau: tuple[float, ...] | None = None    # channel multiplier per scale (tau[0] == 1)
    iota: tuple[float, ...] | None = None   # spatial ratio per scale (iota[0] == 1)
    bottleneck: float = 4.0
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    tx_dim: int = 16
    codec_hidden: int = 128
    exit_blocks: tuple[int, ...] | None = None   # explicit placement; default is even-cost

    def __post_init__(self):
        if self.num_exits < 2:
            raise TocError(f"need at least 2 exits, got {self.num_exits}")
        if self.num_classes < 2:
            raise TocError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_scales < 1:
            raise TocError(f"num_scales must be >= 1, got {self.num_scales}")
        if self.blocks < self.num_exits:
            raise TocError(f"{self.num_exits} exits need at least as many blocks, got {self.blocks}")
        if self.exit_blocks is not None:
            eb = tuple(self.exit_blocks)
            if len(eb) != self.num_exits or any(b2 <= b1 for b1, b2 in zip(eb, eb[1:])):
                raise TocError(f"exit_blocks must be {self.num_exits} strictly increasing block indices")
            if eb[0] < 1 or eb[-1] > self.blocks:
                raise TocError(f"exit_blocks out of range 1..{self.blocks}: {eb}")
            self.exit_blocks = eb
        if self.tau is None:
            self.tau = (1.0,) + (2.0,) * (self.num_scales - 1)
        if self.iota is None:
            self.iota = (1.0,) + (0.5,) * (self.num_scales - 1)
        if len(self.tau) != self.num_scales or len(self.iota) != self.num_scales:
            raise TocError("tau and iota must list one factor per scale")
        if self.tau[0] != 1 or self.iota[0] != 1:
            raise TocError("scale 1 is the reference: tau[0] and iota[0] must be 1")
        for v in range(1, self.num_scales):
            if self.tau[v] < 1:
                raise TocError(f"tau must be >= 1, got {self.tau[v]} at scale {v + 1}")
            if not 0 < self.iota[v] <= 1 or abs(1 / self.iota[v] - round(1 / self.iota[v])) > 1e-9:
                raise TocError(f"iota must be a reciprocal integer in (0,1], got {self.iota[v]}")


@dataclass
class ExitPlacement:
    """Chosen exit blocks (1-based) with their even-spacing targets."""

    blocks: list[int]
    targets: list[float]
    cumulative: list[int]
    max_rel_deviation: float


@dataclass
class ExitOutput:
    exit_index: int
    feature: np.ndarray      # (N, width): input to this exit's channel encoder
    logits: np.ndarray       # (N, M): transmitter confidence-head logits
    confidence: np.ndarray   # (N,): max softmax probability


@dataclass
class DynamicPipeline:
    graph: NetworkGraph
    params: ParameterSet
    config: DynamicConfig

    @property
    def num_exits(self) -> int:
        return len(self.graph.meta["exits"])


def place_exits(cumulative_flops, num_exits: int) -> ExitPlacement:
    """Spread exits evenly in cumulative cost: exit k goes after the block whose
    cumulative FLOPs is nearest k * total / K. Collisions advance to the next
    block so the resulting costs stay strictly increasing."""
    cum = [int(c) for c in cumulative_flops]
    if any(b <= a for a, b in zip(cum, cum[1:])) or (cum and cum[0] <= 0):
        raise TocError(f"cumulative FLOPs must be strictly increasing and positive: {cum}")
    n = len(cum)
    if num_exits > n:
        raise TocError(f"cannot place {num_exits} exits in {n} blocks")
    total = cum[-1]
    blocks: list[int] = []
    targets: list[float] = []
    for k in range(1, num_exits + 1):
        target = k * total / num_exits
        best = min(range(n), key=lambda i: (abs(cum[i] - target), i))
        lowest = blocks[-1] if blocks else 0          # 1-based floor from previous exit
        best = max(best, lowest)                      # keep strictly increasing
        best = min(best, n - 1 - (num_exits - k))     # leave room for the remaining exits
        blocks.append(best + 1)
        targets.append(target)
    dev = max(abs(cum[b - 1] - t) / t for b, t in zip(blocks, targets))
    return ExitPlacement(blocks=blocks, targets=targets, cumulative=cum, max_rel_deviation=dev)


def _dense_layer(g, name, sources, out_channels, stride, bottleneck, scale):
    src = sources[0] if len(sources) == 1 else g.add(f"{name}.cat", "concat", sources, scale=scale)
    kind = "strided-conv" if stride > 1 else "conv"
    attrs = dict(out_channels=out_channels, kernel=3, stride=stride, scale=scale)
    if bottleneck is not None:
        attrs["bottleneck"] = bottleneck
    c = g.add(f"{name}.conv", kind, src, **attrs)
    b = g.add(f"{name}.bn", "batch-norm", c, scale=scale)
    return g.add(f"{name}.relu", "relu", b, scale=scale)


def build_dynamic(cfg: DynamicConfig, with_exits: bool = True) -> NetworkGraph:
    """Assemble the trunk lattice, place exits by cumulative cost, and attach
    per-exit confidence heads and channel codecs. Exit metadata lands in
    ``graph.meta`` for the FLOPs meter and the budgeted runner."""
    g = NetworkGraph(cfg.input_shape)
    V, L = cfg.num_scales, cfg.blocks
    chan = [int(round(cfg.stem_channels * np.prod(cfg.tau[: v + 1]))) for v in range(V)]
    grow = [max(1, int(round(cfg.growth * np.prod(cfg.tau[: v + 1])))) for v in range(V)]

    # Initial layer: scale 1 from the image, each coarser scale strided from the
    # previous scale's stem.
    states: list[list[str]] = []
    prev = g.input_id
    for v in range(V):
        stride = 1 if v == 0 else int(round(1 / cfg.iota[v]))
        prev = _dense_layer(g, f"stem.s{v + 1}", [prev], chan[v], stride, None, v + 1)
        states.append([prev])

    dense_audit = []
    for layer in range(1, L + 1):
        new_nodes = []
        for v in range(V):
            same = list(states[v])
            if v == 0:
                f = _dense_layer(g, f"b{layer}.s1", same, grow[0], 1, cfg.bottleneck, 1)
                dense_audit.append({"scale": 1, "layer": layer, "same_scale": same, "prev_scale": []})
            else:
                below = list(states[v - 1])
                stride = int(round(1 / cfg.iota[v]))
                gb = max(1, grow[v] // 2)
                ga = max(1, grow[v] - gb)
                fa = _dense_layer(g, f"b{layer}.s{v + 1}v", below, ga, stride, cfg.bottleneck, v + 1)
                fb = _dense_layer(g, f"b{layer}.s{v + 1}h", same, gb, 1, cfg.bottleneck, v + 1)
                f = g.add(f"b{layer}.s{v + 1}", "concat", [fa, fb], scale=v + 1)
                dense_audit.append({"scale": v + 1, "layer": layer, "same_scale": same, "prev_scale": below})
            new_nodes.append(f)
        for v in range(V):
            states[v].append(new_nodes[v])

    g.meta["trunk"] = {"states": [list(s) for s in states], "dense_layers": dense_audit, "blocks": L}
    if not with_exits:
        return g

    # Cumulative transmitter cost of the coarsest-scale state after each block.
    profile = profile_graph(g, convention="conv-linear")
    cum = []
    for layer in range(1, L + 1):
        anc = g.ancestors(states[V - 1][: layer + 1])
        cum.append(sum(profile.by_node[n] for n in anc))
    if cfg.exit_blocks is not None:
        total = cum[-1]
        targets = [k * total / cfg.num_exits for k in range(1, cfg.num_exits + 1)]
        dev = max(abs(cum[b - 1] - t) / t for b, t in zip(cfg.exit_blocks, targets))
        placement = ExitPlacement(blocks=list(cfg.exit_blocks), targets=targets,
                                  cumulative=cum, max_rel_deviation=dev)
    else:
        placement = place_exits(cum, cfg.num_exits)

    exits = []
    for k, block in enumerate(placement.blocks, start=1):
        p = f"exit{k}"
        tap_sources = states[V - 1][: block + 1]
        tap = g.add(f"{p}.tap", "concat", tap_sources, scale=V)
        feat = g.add(f"{p}.feature", "global-pool", tap, scale=V)
        conf = g.add(f"{p}.conf", "linear", feat, units=cfg.num_classes)
        conf_prob = g.add(f"{p}.conf_prob", "softmax", conf)
        tx_raw = add_channel_encoder(g, feat, p, tx_dim=cfg.tx_dim, hidden=cfg.codec_hidden)
        tx = g.add(f"{p}.norm", "power-normalize", tx_raw)
        ch = g.add(f"{p}.channel", "channel", tx,
                   channel_kind=cfg.channel.kind, psnr_db=cfg.channel.psnr_db)
        decoded = add_channel_decoder(g, ch, p, tx_dim=cfg.tx_dim, hidden=cfg.codec_hidden)
        logits = g.add(f"{p}.head", "linear", decoded, units=cfg.num_classes)
        zhat = g.add(f"{p}.zhat", "softmax", logits)
        g.mark_output(f"{p}.zhat", zhat)
        exits.append({
            "index": k, "block": block, "tap": tap, "feature": feat,
            "conf_logits": conf, "conf_prob": conf_prob, "tx": tx,
            "channel": ch, "decoded": decoded, "zhat": zhat,
        })
    g.meta["exits"] = exits
    g.meta["placement"] = {
        "blocks": placement.blocks,
        "targets": placement.targets,
        "cumulative": placement.cumulative,
        "max_rel_deviation": placement.max_rel_deviation,
    }
    g.validate()
    g.infer_shapes()
    return g


def build_dynamic_pipeline(cfg: DynamicConfig, rng: np.random.Generator, dtype=np.float64) -> DynamicPipeline:
    g = build_dynamic(cfg)
    return DynamicPipeline(graph=g, params=init_params(g, rng, dtype=dtype), config=cfg)


def confidence(logits: np.ndarray) -> float | np.ndarray:
    """Max softmax probability, computed with max-subtraction for stability.

    Accepts a single logit vector (returns a float) or a batch (returns a
    vector). Shift-invariant in the logits by construction.
    """
    a = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("confidence: logits contain NaN/Inf")
    if a.ndim == 1:
        if a.size < 2:
            raise TocError("confidence needs at least two classes")
        z = a - a.max()
        e = np.exp(z)
        return float(e.max() / e.sum())
    if a.shape[-1] < 2:
        raise TocError("confidence needs at least two classes")
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e.max(axis=-1) / e.sum(axis=-1)


def forward_to_exit(graph: NetworkGraph, params: ParameterSet, x: np.ndarray, k: int,
                    cache: ForwardResult | None = None, mode: str = "eval",
                    rng: np.random.Generator | None = None) -> tuple[ExitOutput, ForwardResult]:
    """Evaluate only the transmitter-side subgraph needed for exit k.

    Passing the previous call's result as ``cache`` makes the evaluation
    incremental: nothing already computed is recomputed. Returns the exit
    output plus the (extended) forward result.
    """
    exits = graph.meta.get("exits")
    if not exits:
        raise TocError("graph has no exits")
    if not 1 <= k <= len(exits):
        raise TocError(f"exit index {k} out of range 1..{len(exits)}")
    ex = exits[k - 1]
    res = forward(graph, params, x, mode=mode, rng=rng,
                  nodes=[ex["feature"], ex["conf_logits"]], cache=cache)
    logits = res[ex["conf_logits"]]
    return ExitOutput(k, res[ex["feature"]], logits, np.asarray(confidence(logits))), res
