"""Layer specifications, the network DAG, and static shape inference.

A :class:`NetworkGraph` is an ordered DAG of named nodes. Construction order
is a topological order by design: a node may only consume nodes that already
exist. Shapes are per-sample (no batch axis); the runtime engine prepends the
batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable

from .errors import GraphError, ShapeError

# Layer kinds understood by the engine. "channel" is the stochastic wireless
# hop; it carries non-trainable behaviour only.
LAYER_KINDS = frozenset(
    {
        "input",
        "conv",
        "strided-conv",
        "linear",
        "relu",
        "batch-norm",
        "layer-norm",
        "avg-pool",
        "global-pool",
        "concat",
        "add",
        "softmax",
        "power-normalize",
        "channel",
    }
)


@dataclass
class LayerSpec:
    """One layer's kind plus kind-specific attributes.

    Common attributes: conv/strided-conv use ``out_channels``, ``kernel``,
    ``stride``, ``pad`` and optionally ``bottleneck`` (a width factor used by
    the FLOPs meter); linear uses ``units``; channel uses ``channel_kind``,
    ``psnr_db``; norms use ``eps``/``momentum``. ``scale`` tags the feature
    scale a node belongs to, for reporting only.
    """

    kind: str
    attrs: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}")
        a = self.attrs
        if self.kind in ("conv", "strided-conv"):
            kernel = a.get("kernel", 3)
            stride = a.get("stride", 1 if self.kind == "conv" else 2)
            if kernel < 1:
                raise GraphError(f"{self.kind}: kernel size must be >= 1, got {kernel}")
            if stride < 1:
                raise GraphError(f"{self.kind}: stride must be >= 1, got {stride}")
            if self.kind == "strided-conv" and stride < 2:
                raise GraphError(f"strided-conv: stride must be >= 2, got {stride}")
            if a.get("out_channels", 1) < 1:
                raise GraphError(f"{self.kind}: out_channels must be >= 1")
            a.setdefault("kernel", kernel)
            a.setdefault("stride", stride)
            a.setdefault("pad", kernel // 2)
        elif self.kind == "linear":
            if a.get("units", 0) <= 0:
                raise GraphError(f"linear: units must be > 0, got {a.get('units')}")
        elif self.kind == "avg-pool":
            a.setdefault("kernel", 2)
        elif self.kind in ("batch-norm", "layer-norm"):
            a.setdefault("eps", 1e-5)
            if self.kind == "batch-norm":
                a.setdefault("momentum", 0.1)
        elif self.kind == "channel":
            a.setdefault("channel_kind", "noiseless")
            a.setdefault("psnr_db", 0.0)


@dataclass
class Node:
    id: str
    spec: LayerSpec
    inputs: list[str]


class NetworkGraph:
    """Ordered DAG of layers with named input, outputs, and exit metadata.

    ``outputs`` maps logical names (e.g. ``"prediction"``) to node ids.
    ``meta["exits"]`` (when present) lists per-exit node ids used by the
    FLOPs meter and the budgeted runner.
    """

    def __init__(self, input_shape: tuple[int, ...], input_id: str = "input"):
        if any(d <= 0 for d in input_shape):
            raise GraphError(f"input shape must be positive, got {input_shape}")
        self.input_id = input_id
        self.input_shape = tuple(input_shape)
        self.nodes: dict[str, Node] = {}
        self.order: list[str] = []
        self.outputs: dict[str, str] = {}
        self.meta: dict[str, Any] = {}
        self._add_node(input_id, LayerSpec("input"), [])

    # -- construction -------------------------------------------------------

    def _add_node(self, node_id: str, spec: LayerSpec, inputs: list[str]) -> str:
        if node_id in self.nodes:
            raise GraphError(f"duplicate node id {node_id!r}")
        for src in inputs:
            if src not in self.nodes:
                raise GraphError(f"node {node_id!r} consumes unknown node {src!r}")
        self.nodes[node_id] = Node(node_id, spec, list(inputs))
        self.order.append(node_id)
        return node_id

    def add(self, node_id: str, kind: str, inputs: str | Iterable[str], **attrs) -> str:
        """Append a layer; ``inputs`` may be a single id or a sequence."""
        if isinstance(inputs, str):
            inputs = [inputs]
        return self._add_node(node_id, LayerSpec(kind, attrs), list(inputs))

    def mark_output(self, name: str, node_id: str) -> None:
        if node_id not in self.nodes:
            raise GraphError(f"cannot mark unknown node {node_id!r} as output")
        self.outputs[name] = node_id

    # -- queries ------------------------------------------------------------

    def ancestors(self, node_ids: str | Iterable[str]) -> set[str]:
        """All nodes a target set depends on, targets included."""
        if isinstance(node_ids, str):
            node_ids = [node_ids]
        seen: set[str] = set()
        stack = list(node_ids)
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            if nid not in self.nodes:
                raise GraphError(f"unknown node {nid!r}")
            seen.add(nid)
            stack.extend(self.nodes[nid].inputs)
        return seen

    def validate(self) -> None:
        """Check reachability of every declared output and exit from the input."""
        for name, nid in self.outputs.items():
            if self.input_id not in self.ancestors(nid):
                raise GraphError(f"output {name!r} ({nid}) unreachable from input")

    # -- shape inference -----------------------------------------------------

    def infer_shapes(self) -> dict[str, tuple[int, ...]]:
        """Per-sample output shape of every node; raises ShapeError naming the node."""
        shapes: dict[str, tuple[int, ...]] = {}
        for nid in self.order:
            node = self.nodes[nid]
            ins = [shapes[i] for i in node.inputs]
            shapes[nid] = _infer_node_shape(node, self.input_shape, ins)
        return shapes


def _conv_out_hw(h, w, kernel, stride, pad, nid):
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (w + 2 * pad - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"node {nid!r}: kernel {kernel} too large for input {h}x{w}")
    return ho, wo


def _infer_node_shape(node: Node, input_shape, ins) -> tuple[int, ...]:
    kind = node.spec.kind
    a = node.spec.attrs
    nid = node.id

    def need(n):
        if len(ins) != n:
            raise ShapeError(f"node {nid!r}: expected {n} input(s), got {len(ins)}")

    if kind == "input":
        return input_shape
    if kind in ("conv", "strided-conv"):
        need(1)
        if len(ins[0]) != 3:
            raise ShapeError(f"node {nid!r}: conv expects (H,W,C), got {ins[0]}")
        h, w, c = ins[0]
        ho, wo = _conv_out_hw(h, w, a["kernel"], a["stride"], a["pad"], nid)
        return (ho, wo, a["out_channels"])
    if kind == "linear":
        need(1)
        if len(ins[0]) != 1:
            raise ShapeError(f"node {nid!r}: linear expects a flat (D,) input, got {ins[0]}")
        return (a["units"],)
    if kind in ("relu", "batch-norm", "layer-norm", "softmax", "power-normalize", "channel"):
        need(1)
        return ins[0]
    if kind == "avg-pool":
        need(1)
        h, w, c = ins[0]
        k = a["kernel"]
        if h % k or w % k:
            raise ShapeError(f"node {nid!r}: pool kernel {k} does not divide {h}x{w}")
        return (h // k, w // k, c)
    if kind == "global-pool":
        need(1)
        if len(ins[0]) != 3:
            raise ShapeError(f"node {nid!r}: global-pool expects (H,W,C), got {ins[0]}")
        return (ins[0][-1],)
    if kind == "concat":
        if not ins:
            raise ShapeError(f"node {nid!r}: concat needs at least one input")
        heads = {s[:-1] for s in ins}
        if len(heads) != 1:
            raise ShapeError(f"node {nid!r}: concat inputs disagree before the channel axis: {ins}")
        return ins[0][:-1] + (sum(s[-1] for s in ins),)
    if kind == "add":
        if len(ins) < 2:
            raise ShapeError(f"node {nid!r}: add needs at least two inputs")
        if len(set(ins)) != 1:
            raise ShapeError(f"node {nid!r}: add inputs must share a shape, got {ins}")
        return ins[0]
    raise GraphError(f"node {nid!r}: no shape rule for kind {kind!r}")
