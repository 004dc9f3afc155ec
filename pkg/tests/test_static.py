"""Static pipeline construction audits, the loss, and evaluation semantics."""

import numpy as np
import pytest

from toclib.channel import ChannelSpec
from toclib.data import gen_synthetic, to_onehot
from toclib.errors import ShapeError, TocError
from toclib.static_model import StaticConfig, build_static, evaluate_accuracy, static_loss
from toclib.training import TrainConfig, train


def test_tiny8_builds_and_transmits_16():
    cfg = StaticConfig(depth="tiny-8", num_classes=4, input_shape=(16, 16, 1),
                       channel=ChannelSpec("noiseless"))
    pipe = build_static(cfg, np.random.default_rng(0))
    shapes = pipe.graph.infer_shapes()
    assert shapes[pipe.graph.outputs["tx"]] == (16,)
    assert shapes[pipe.graph.outputs["prediction"]] == (4,)
    convs = [n for n in pipe.graph.order if pipe.graph.nodes[n].spec.kind in ("conv", "strided-conv")]
    assert 7 <= len(convs) <= 10


def test_resnet20_feature_width_and_codec_fan_in():
    cfg = StaticConfig(depth=20, num_classes=100, input_shape=(32, 32, 3),
                       channel=ChannelSpec("awgn", 12.0))
    pipe = build_static(cfg, np.random.default_rng(0))
    g = pipe.graph
    shapes = g.infer_shapes()
    assert shapes[g.outputs["feature"]] == (64,)            # pooled trunk output
    assert pipe.params["link.enc_fc1"]["w"].shape == (128, 64)
    assert pipe.params["link.enc_fc2"]["w"].shape == (16, 128)
    # 6n+2 layout: 3 stages x 3 blocks x 2 convs + stem + 2 projections
    convs = [n for n in g.order if g.nodes[n].spec.kind in ("conv", "strided-conv")
             and not n.startswith(("link", "head"))]
    assert len(convs) == 21


def test_bad_configs_rejected():
    with pytest.raises(TocError):
        StaticConfig(num_classes=0)
    with pytest.raises(TocError):
        StaticConfig(depth=21)
    with pytest.raises(TocError):
        StaticConfig(depth="resnet-enormous")


def test_static_loss_examples():
    onehot = np.array([[1.0, 0.0]])
    assert static_loss(onehot, np.array([[1.0, 0.0]])) == pytest.approx(0.0, abs=1e-9)
    uniform = np.full((3, 10), 0.1)
    labels = to_onehot(np.array([0, 4, 9]), 10)
    assert static_loss(labels, uniform) == pytest.approx(np.log(10), rel=1e-9)
    assert static_loss(onehot, np.array([[0.7, 0.3]])) == pytest.approx(0.356675, abs=1e-6)
    with pytest.raises(ShapeError):
        static_loss(onehot, uniform)


def test_constant_predictor_scores_one_over_m():
    cfg = StaticConfig(depth="tiny-8", num_classes=4, input_shape=(8, 8, 1),
                       channel=ChannelSpec("noiseless"), tiny_width=2)
    pipe = build_static(cfg, np.random.default_rng(0))
    # rig the receiver head to always vote class 0
    pipe.params["head.fc"]["w"][:] = 0.0
    pipe.params["head.fc"]["b"][:] = np.array([5.0, 0.0, 0.0, 0.0])
    images = np.random.default_rng(1).random((40, 8, 8, 1))
    labels = np.arange(40) % 4  # balanced
    acc = evaluate_accuracy(pipe, images, labels)
    assert acc == pytest.approx(0.25)


def test_memorization_reaches_full_accuracy():
    ds = gen_synthetic(n=10, size=8, classes=2, noise=0.0, jitter=0, seed=3,
                       val_fraction=0.0, test_fraction=0.0)
    sp = ds.split("train")
    cfg = StaticConfig(depth="tiny-8", num_classes=2, input_shape=(8, 8, 1),
                       channel=ChannelSpec("noiseless"), tiny_width=4)
    pipe = build_static(cfg, np.random.default_rng(0))
    tcfg = TrainConfig(epochs=200, batch_size=10, lr=0.1, momentum=0.9,
                       weight_decay=0.0, seed=0)
    train(pipe, sp.images, to_onehot(sp.labels, 2), tcfg)
    assert evaluate_accuracy(pipe, sp.images, sp.labels) == 1.0


def test_same_seed_gives_identical_accuracy():
    cfg = StaticConfig(depth="tiny-8", num_classes=4, input_shape=(8, 8, 1),
                       channel=ChannelSpec("awgn", 6.0), tiny_width=2)
    pipe = build_static(cfg, np.random.default_rng(0))
    images = np.random.default_rng(1).random((30, 8, 8, 1))
    labels = np.random.default_rng(2).integers(4, size=30)
    a = evaluate_accuracy(pipe, images, labels, rng=np.random.default_rng(5))
    b = evaluate_accuracy(pipe, images, labels, rng=np.random.default_rng(5))
    assert a == b


def test_empty_split_rejected():
    cfg = StaticConfig(depth="tiny-8", num_classes=4, input_shape=(8, 8, 1),
                       channel=ChannelSpec("noiseless"), tiny_width=2)
    pipe = build_static(cfg, np.random.default_rng(0))
    with pytest.raises(TocError):
        evaluate_accuracy(pipe, np.zeros((0, 8, 8, 1)), np.zeros(0, dtype=int))
