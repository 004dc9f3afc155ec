"""Graph execution: forward evaluation, exact reverse-mode backward, parameter
initialization, and a central-finite-difference gradient oracle.

Forward supports partial evaluation (``nodes=``) and incremental extension of a
previous result (``cache=``); both are what makes early exits cheap. All
randomness (channel drawing) flows through an explicitly passed Generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from . import ops
from .channel import ChannelSpec, transmit
from .errors import GraphError, NonFiniteError, ShapeError, TocError
from .network import NetworkGraph

ParameterSet = dict  # node id -> {name: ndarray}
GradientSet = dict

# Parameter names that are state, not trainable weights (batch-norm statistics).
BUFFER_KEYS = frozenset({"running_mean", "running_var"})


@dataclass
class ForwardResult:
    """Activations plus the bookkeeping backward needs.

    ``computed`` lists node ids evaluated by this call (cache hits excluded),
    in evaluation order; it doubles as the instrumentation used by the
    early-exit cost audits.
    """

    values: dict[str, np.ndarray] = field(default_factory=dict)
    tape: dict[str, Any] = field(default_factory=dict)
    computed: list[str] = field(default_factory=list)
    mode: str = "eval"

    def __getitem__(self, node_id: str) -> np.ndarray:
        return self.values[node_id]

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.values


def init_params(graph: NetworkGraph, rng: np.random.Generator, dtype=np.float64) -> ParameterSet:
    """Scaled-Gaussian fan-in init for conv/linear; ones/zeros for norms.

    Deterministic given the generator state; iteration follows construction
    order so the same seed always yields the same parameters.
    """
    shapes = graph.infer_shapes()
    params: ParameterSet = {}
    for nid in graph.order:
        node = graph.nodes[nid]
        kind = node.spec.kind
        a = node.spec.attrs
        if kind in ("conv", "strided-conv"):
            c_in = shapes[node.inputs[0]][-1]
            c_out, k = a["out_channels"], a["kernel"]
            std = np.sqrt(2.0 / (c_in * k * k))
            params[nid] = {
                "w": (rng.standard_normal((k, k, c_in, c_out)) * std).astype(dtype),
                "b": np.zeros(c_out, dtype=dtype),
            }
        elif kind == "linear":
            d_in = shapes[node.inputs[0]][0]
            units = a["units"]
            std = np.sqrt(2.0 / d_in)
            params[nid] = {
                "w": (rng.standard_normal((units, d_in)) * std).astype(dtype),
                "b": np.zeros(units, dtype=dtype),
            }
        elif kind == "batch-norm":
            c = shapes[node.inputs[0]][-1]
            params[nid] = {
                "gamma": np.ones(c, dtype=dtype),
                "beta": np.zeros(c, dtype=dtype),
                "running_mean": np.zeros(c, dtype=dtype),
                "running_var": np.ones(c, dtype=dtype),
            }
        elif kind == "layer-norm":
            d = shapes[node.inputs[0]][-1]
            params[nid] = {"gamma": np.ones(d, dtype=dtype), "beta": np.zeros(d, dtype=dtype)}
    return params


def zeros_like_params(params: ParameterSet) -> GradientSet:
    """A GradientSet mirroring ``params`` key-for-key and shape-for-shape."""
    return {nid: {k: np.zeros_like(v) for k, v in group.items()} for nid, group in params.items()}


def forward(
    graph: NetworkGraph,
    params: ParameterSet,
    x: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    nodes: Iterable[str] | None = None,
    cache: ForwardResult | None = None,
    channel_override: ChannelSpec | None = None,
) -> ForwardResult:
    """Evaluate the graph (or the ancestor set of ``nodes``) on a batch.

    ``cache`` carries activations from an earlier partial call on the same
    batch; cached nodes are never recomputed. Train mode uses batch statistics
    in batch-norm and updates the running statistics held in ``params``
    (single-writer contract); eval mode is pure given (graph, params, rng).
    """
    if mode not in ("train", "eval"):
        raise TocError(f"unknown mode {mode!r}")
    x = np.asarray(x)
    if x.ndim == len(graph.input_shape):
        x = x[None]
    if x.shape[1:] != graph.input_shape:
        raise ShapeError(f"node 'input': expected {graph.input_shape} per sample, got {x.shape[1:]}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("forward input contains NaN/Inf")

    if nodes is None:
        needed = set(graph.order)
    else:
        needed = graph.ancestors(list(nodes))

    res = ForwardResult(mode=mode)
    if cache is not None:
        res.values.update(cache.values)
        res.tape.update(cache.tape)

    for nid in graph.order:
        if nid not in needed or nid in res.values:
            continue
        node = graph.nodes[nid]
        ins = [res.values[i] for i in node.inputs]
        res.values[nid], res.tape[nid] = _node_forward(
            node, ins, params, x, mode, rng, channel_override
        )
        res.computed.append(nid)
    return res


def _node_forward(node, ins, params, x, mode, rng, channel_override):
    kind = node.spec.kind
    a = node.spec.attrs
    nid = node.id
    try:
        if kind == "input":
            return x, None
        if kind in ("conv", "strided-conv"):
            p = params[nid]
            out, aux = ops.conv_forward(ins[0], p["w"], p["b"], a["stride"], a["pad"])
            return out, aux
        if kind == "linear":
            p = params[nid]
            return ops.linear_forward(ins[0], p["w"], p["b"])
        if kind == "relu":
            return ops.relu_forward(ins[0])
        if kind == "batch-norm":
            p = params[nid]
            out, aux, (new_rm, new_rv) = ops.batchnorm_forward(
                ins[0], p["gamma"], p["beta"], p["running_mean"], p["running_var"],
                a["eps"], a["momentum"], mode == "train",
            )
            if mode == "train":
                p["running_mean"], p["running_var"] = new_rm, new_rv
            return out, aux
        if kind == "layer-norm":
            p = params[nid]
            return ops.layernorm_forward(ins[0], p["gamma"], p["beta"], a["eps"])
        if kind == "avg-pool":
            return ops.avgpool_forward(ins[0], a["kernel"])
        if kind == "global-pool":
            return ops.globalpool_forward(ins[0])
        if kind == "concat":
            sizes = [v.shape[-1] for v in ins]
            return np.concatenate(ins, axis=-1), sizes
        if kind == "add":
            return sum(ins[1:], start=ins[0].copy()), len(ins)
        if kind == "softmax":
            return ops.softmax_forward(ins[0])
        if kind == "power-normalize":
            return ops.power_normalize_forward(ins[0])
        if kind == "channel":
            spec = channel_override or ChannelSpec(a["channel_kind"], a["psnr_db"])
            y, gain = transmit(ins[0], spec, rng)
            return y, gain
    except (ShapeError, GraphError, NonFiniteError, TocError):
        raise
    except ValueError as e:
        raise ShapeError(f"node {nid!r}: {e}") from e
    raise GraphError(f"node {nid!r}: no forward rule for kind {kind!r}")


def backward(
    graph: NetworkGraph,
    params: ParameterSet,
    result: ForwardResult,
    grad_outputs: dict[str, np.ndarray],
) -> GradientSet:
    """Exact reverse-mode gradients for every parameter.

    ``grad_outputs`` maps node ids to the objective's gradient at those nodes.
    Returns a GradientSet mirroring the ParameterSet exactly; buffer entries
    (running statistics) are zero.
    """
    grads = zeros_like_params(params)
    dacts: dict[str, np.ndarray] = {}
    for nid, g in grad_outputs.items():
        if nid not in result.values:
            raise GraphError(f"no activation for node {nid!r}; was it evaluated?")
        if g.shape != result.values[nid].shape:
            raise ShapeError(f"node {nid!r}: output gradient shape {g.shape} != activation {result.values[nid].shape}")
        dacts[nid] = np.array(g, copy=True)

    evaluated = [nid for nid in graph.order if nid in result.values]
    for nid in reversed(evaluated):
        if nid not in dacts:
            continue
        node = graph.nodes[nid]
        dout = dacts.pop(nid)
        din = _node_backward(node, dout, result, params, grads)
        for src, d in zip(node.inputs, din):
            if src in dacts:
                dacts[src] += d
            else:
                dacts[src] = d
    return grads


def _node_backward(node, dout, result, params, grads):
    kind = node.spec.kind
    a = node.spec.attrs
    nid = node.id
    aux = result.tape.get(nid)

    if kind == "input":
        return []
    if kind in ("conv", "strided-conv"):
        dx, dw, db = ops.conv_backward(dout, params[nid]["w"], aux, a["stride"], a["pad"])
        grads[nid]["w"] += dw
        grads[nid]["b"] += db
        return [dx]
    if kind == "linear":
        dx, dw, db = ops.linear_backward(dout, params[nid]["w"], aux)
        grads[nid]["w"] += dw
        grads[nid]["b"] += db
        return [dx]
    if kind == "relu":
        return [ops.relu_backward(dout, aux)]
    if kind == "batch-norm":
        dx, dgamma, dbeta = ops.batchnorm_backward(dout, params[nid]["gamma"], aux)
        grads[nid]["gamma"] += dgamma
        grads[nid]["beta"] += dbeta
        return [dx]
    if kind == "layer-norm":
        dx, dgamma, dbeta = ops.layernorm_backward(dout, params[nid]["gamma"], aux)
        grads[nid]["gamma"] += dgamma
        grads[nid]["beta"] += dbeta
        return [dx]
    if kind == "avg-pool":
        return [ops.avgpool_backward(dout, aux)]
    if kind == "global-pool":
        return [ops.globalpool_backward(dout, aux)]
    if kind == "concat":
        return list(np.split(dout, np.cumsum(aux)[:-1], axis=-1))
    if kind == "add":
        return [dout] * aux
    if kind == "softmax":
        return [ops.softmax_backward(dout, aux)]
    if kind == "power-normalize":
        return [ops.power_normalize_backward(dout, aux)]
    if kind == "channel":
        # Noise is a constant during backward; a Rayleigh fade scales the
        # upstream gradient by the drawn per-sample gain.
        if aux is None:
            return [dout]
        return [dout * aux[:, None]]
    raise GraphError(f"node {nid!r}: no backward rule for kind {kind!r}")


# -- finite-difference oracle -------------------------------------------------


def _probe_weights(graph, result, output_ids, rng):
    return {o: rng.standard_normal(result.values[o].shape) for o in output_ids}


def _objective(graph, params, x, probe, mode, forward_seed, channel_override):
    rng = np.random.default_rng(forward_seed)
    res = forward(graph, params, x, mode=mode, rng=rng, nodes=list(probe), channel_override=channel_override)
    return sum(float(np.sum(w * res.values[o])) for o, w in probe.items()), res


def numeric_gradients(
    graph, params, x, probe, h=1e-5, mode="train", forward_seed=0, channel_override=None
) -> GradientSet:
    """Central finite differences of a probe objective w.r.t. every trainable entry.

    The channel draw is frozen by reseeding each evaluation, so the objective
    is deterministic in the parameters. O(#params) forward passes: keep the
    network toy-sized.
    """
    snapshot = {nid: {k: v.copy() for k, v in g.items()} for nid, g in params.items()}
    grads = zeros_like_params(params)
    for nid, group in params.items():
        for key, w in group.items():
            if key in BUFFER_KEYS:
                continue
            flat = w.reshape(-1)
            gflat = grads[nid][key].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus, _ = _objective(graph, params, x, probe, mode, forward_seed, channel_override)
                flat[i] = orig - h
                f_minus, _ = _objective(graph, params, x, probe, mode, forward_seed, channel_override)
                flat[i] = orig
                gflat[i] = (f_plus - f_minus) / (2.0 * h)
    for nid, group in params.items():
        for key in group:
            if key in BUFFER_KEYS:
                np.copyto(params[nid][key], snapshot[nid][key])
    return grads


def gradient_report(analytic: GradientSet, numeric: GradientSet, floor: float = 1e-6) -> dict[str, float]:
    """Max relative error per parameter group, keyed "node.key"."""
    report = {}
    for nid, group in analytic.items():
        for key, a in group.items():
            if key in BUFFER_KEYS:
                continue
            b = numeric[nid][key]
            denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
            report[f"{nid}.{key}"] = float(np.max(np.abs(a - b) / denom))
    return report


def finite_diff_check(
    graph: NetworkGraph,
    params: ParameterSet,
    x: np.ndarray,
    outputs: Iterable[str] | None = None,
    h: float = 1e-5,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    kink_tol: float = 1e-6,
) -> dict[str, float]:
    """Compare backward against central differences; max relative error per group.

    The probe objective is a fixed random weighting of the requested outputs.
    If any ReLU pre-activation sits within ``kink_tol`` of zero the evaluation
    point is resampled (up to 3 times) to avoid false kink failures.
    """
    rng = rng or np.random.default_rng(0)
    output_ids = list(outputs) if outputs else [graph.outputs[k] for k in graph.outputs] or [graph.order[-1]]
    forward_seed = int(rng.integers(2**31))

    x = np.asarray(x, dtype=float)
    for _ in range(3):
        res = forward(graph, params, x, mode=mode, rng=np.random.default_rng(forward_seed), nodes=output_ids)
        near_kink = any(
            np.any(np.abs(res.values[graph.nodes[nid].inputs[0]]) < kink_tol)
            for nid in res.values
            if graph.nodes[nid].spec.kind == "relu" and graph.nodes[nid].inputs[0] in res.values
        )
        if not near_kink:
            break
        x = x + rng.standard_normal(x.shape) * 1e-3

    probe = _probe_weights(graph, res, output_ids, np.random.default_rng(forward_seed + 1))
    _, res = _objective(graph, params, x, probe, mode, forward_seed, None)
    analytic = backward(graph, params, res, probe)
    numeric = numeric_gradients(graph, params, x, probe, h=h, mode=mode, forward_seed=forward_seed)
    return gradient_report(analytic, numeric)
