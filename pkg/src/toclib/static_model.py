"""Static pipeline: residual feature encoder -> channel codec -> channel ->
decoder -> receiver head, trained end to end with cross-entropy.

Two encoder families: the classic 6n+2 residual layout (depths 20/32/44/56/110
on 32x32 inputs) and "tiny-8", a three-stage desk-scale variant for
CPU-minute experiments on 16x16 inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelSpec, add_channel_decoder, add_channel_encoder
from .engine import ParameterSet, forward, init_params
from .errors import ShapeError, TocError
from .network import NetworkGraph

RESNET_STAGE_WIDTHS = (16, 32, 64)


@dataclass
class StaticConfig:
    depth: int | str = "tiny-8"          # "tiny-8" or 6n+2 (20, 32, 44, 56, 110, ...)
    num_classes: int = 4
    input_shape: tuple[int, int, int] = (16, 16, 1)   # (H, W, C)
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    tx_dim: int = 16
    codec_hidden: int = 128
    tiny_width: int = 8

    def __post_init__(self):
        if self.num_classes < 2:
            raise TocError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.depth != "tiny-8":
            d = self.depth
            if not isinstance(d, int) or d < 8 or (d - 2) % 6 != 0:
                raise TocError(f"unsupported encoder depth {d!r}: expected 'tiny-8' or 6n+2")


@dataclass
class StaticPipeline:
    graph: NetworkGraph
    params: ParameterSet
    config: StaticConfig


def _conv_bn_relu(g, src, name, channels, stride=1):
    kind = "strided-conv" if stride > 1 else "conv"
    c = g.add(f"{name}.conv", kind, src, out_channels=channels, kernel=3, stride=stride)
    b = g.add(f"{name}.bn", "batch-norm", c)
    return g.add(f"{name}.relu", "relu", b)


def _residual_block(g, src, name, channels, stride=1, project=False):
    c1 = g.add(f"{name}.conv1", "strided-conv" if stride > 1 else "conv", src,
               out_channels=channels, kernel=3, stride=stride)
    b1 = g.add(f"{name}.bn1", "batch-norm", c1)
    r1 = g.add(f"{name}.relu1", "relu", b1)
    c2 = g.add(f"{name}.conv2", "conv", r1, out_channels=channels, kernel=3)
    b2 = g.add(f"{name}.bn2", "batch-norm", c2)
    skip = src
    if project:
        sc = g.add(f"{name}.proj", "strided-conv" if stride > 1 else "conv", src,
                   out_channels=channels, kernel=1, stride=stride, pad=0)
        skip = g.add(f"{name}.proj_bn", "batch-norm", sc)
    s = g.add(f"{name}.add", "add", [skip, b2])
    return g.add(f"{name}.relu2", "relu", s)


def _build_tiny8_trunk(g: NetworkGraph, width: int) -> str:
    h = _conv_bn_relu(g, g.input_id, "stem", width)
    for i, w in enumerate((width, 2 * width, 4 * width)):
        h = _conv_bn_relu(g, h, f"stage{i + 1}.a", w)
        h = _residual_block(g, h, f"stage{i + 1}.b", w)
        if i < 2:
            h = g.add(f"stage{i + 1}.pool", "avg-pool", h, kernel=2)
    return g.add("trunk_pool", "global-pool", h)


def _build_resnet_trunk(g: NetworkGraph, depth: int) -> str:
    n = (depth - 2) // 6
    h = _conv_bn_relu(g, g.input_id, "stem", RESNET_STAGE_WIDTHS[0])
    for s, w in enumerate(RESNET_STAGE_WIDTHS):
        for b in range(n):
            first = b == 0 and s > 0
            h = _residual_block(g, h, f"stage{s + 1}.block{b + 1}", w,
                                stride=2 if first else 1, project=first)
    return g.add("trunk_pool", "global-pool", h)


def build_static(cfg: StaticConfig, rng: np.random.Generator, dtype=np.float64) -> StaticPipeline:
    """Assemble the single-exit pipeline and initialize its parameters.

    The receiver inference block is a single linear layer followed by softmax,
    keeping receiver-side cost negligible next to the encoder.
    """
    g = NetworkGraph(cfg.input_shape)
    feature = (_build_tiny8_trunk(g, cfg.tiny_width) if cfg.depth == "tiny-8"
               else _build_resnet_trunk(g, cfg.depth))
    tx_raw = add_channel_encoder(g, feature, "link", tx_dim=cfg.tx_dim, hidden=cfg.codec_hidden)
    tx = g.add("link.norm", "power-normalize", tx_raw)
    ch = g.add("link.channel", "channel", tx,
               channel_kind=cfg.channel.kind, psnr_db=cfg.channel.psnr_db)
    decoded = add_channel_decoder(g, ch, "link", tx_dim=cfg.tx_dim, hidden=cfg.codec_hidden)
    logits = g.add("head.fc", "linear", decoded, units=cfg.num_classes)
    zhat = g.add("head.softmax", "softmax", logits)

    g.mark_output("feature", feature)
    g.mark_output("tx", tx)
    g.mark_output("prediction", zhat)
    g.meta["exits"] = [{"index": 1, "tx": tx, "zhat": zhat, "feature": feature}]
    g.validate()
    g.infer_shapes()  # fail fast on any wiring mistake
    return StaticPipeline(graph=g, params=init_params(g, rng, dtype=dtype), config=cfg)


def static_loss(z: np.ndarray, zhat: np.ndarray) -> float:
    """Mean cross-entropy between one-hot labels and predicted distributions."""
    z = np.asarray(z)
    zhat = np.asarray(zhat)
    if z.shape != zhat.shape:
        raise ShapeError(f"labels {z.shape} and predictions {zhat.shape} disagree")
    return float(-np.sum(z * np.log(np.maximum(zhat, 1e-12))) / z.shape[0])


def predict(pipeline: StaticPipeline, images: np.ndarray,
            rng: np.random.Generator | None = None,
            channel: ChannelSpec | None = None) -> np.ndarray:
    """Class distribution for a batch, through the (possibly overridden) channel."""
    g = pipeline.graph
    res = forward(g, pipeline.params, images, mode="eval", rng=rng,
                  nodes=[g.outputs["prediction"]], channel_override=channel)
    return res[g.outputs["prediction"]]


def evaluate_accuracy(pipeline: StaticPipeline, images: np.ndarray, labels: np.ndarray,
                      channel: ChannelSpec | None = None,
                      rng: np.random.Generator | None = None,
                      batch_size: int = 512) -> float:
    """Fraction of argmax-correct predictions; deterministic given the rng seed."""
    if len(images) == 0:
        raise TocError("cannot evaluate on an empty split")
    hits = 0
    for lo in range(0, len(images), batch_size):
        p = predict(pipeline, images[lo : lo + batch_size], rng=rng, channel=channel)
        hits += int(np.sum(np.argmax(p, axis=1) == labels[lo : lo + batch_size]))
    return hits / len(images)
