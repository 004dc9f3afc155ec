"""Forward/backward correctness, optimizer arithmetic, determinism, checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toclib.checkpoint import load_checkpoint, save_checkpoint
from toclib.engine import (
    BUFFER_KEYS,
    backward,
    finite_diff_check,
    forward,
    gradient_report,
    init_params,
    numeric_gradients,
    zeros_like_params,
)
from toclib.errors import CheckpointError, GraphError, NonFiniteError, ShapeError, TocError
from toclib.network import NetworkGraph
from toclib.optim import OptimizerState, sgd_step


def _toy_net(seed=0):
    g = NetworkGraph((6, 6, 2))
    g.add("c1", "conv", "input", out_channels=3, kernel=3)
    g.add("bn1", "batch-norm", "c1")
    g.add("r1", "relu", "bn1")
    g.add("p1", "avg-pool", "r1", kernel=2)
    g.add("gp", "global-pool", "p1")
    g.add("fc", "linear", "gp", units=4)
    g.add("sm", "softmax", "fc")
    g.mark_output("pred", "sm")
    return g, init_params(g, np.random.default_rng(seed))


def test_linear_forward_hand_example():
    # W x + b with W=[[1,2],[3,4]], b=[0.5,-0.5], x=[1,1] evaluates to [3.5, 6.5]
    g = NetworkGraph((2,))
    g.add("fc", "linear", "input", units=2)
    params = {"fc": {"w": np.array([[1.0, 2.0], [3.0, 4.0]]), "b": np.array([0.5, -0.5])}}
    out = forward(g, params, np.array([[1.0, 1.0]]))["fc"]
    np.testing.assert_allclose(out, [[3.5, 6.5]])


def test_relu_definition():
    g = NetworkGraph((3,))
    g.add("r", "relu", "input")
    out = forward(g, {}, np.array([[-1.0, 0.0, 2.0]]))["r"]
    np.testing.assert_array_equal(out, [[0.0, 0.0, 2.0]])


def test_power_normalize_divides_by_rms():
    g = NetworkGraph((4,))
    g.add("pn", "power-normalize", "input")
    x = np.array([[4.0, -4.0, 4.0, -4.0]])  # mean square 16, rms 4
    out = forward(g, {}, x)["pn"]
    np.testing.assert_allclose(out, x / 4.0)
    np.testing.assert_allclose(np.mean(out**2), 1.0)


def test_softmax_cross_entropy_gradient_identity():
    # d(CE)/d(logits) through the softmax kernel equals softmax(logits) - onehot
    from toclib import ops

    rng = np.random.default_rng(3)
    logits = rng.standard_normal((4, 5))
    onehot = np.eye(5)[rng.integers(5, size=4)]
    p, aux = ops.softmax_forward(logits)
    dprobs = -onehot / np.maximum(p, 1e-12)
    dlogits = ops.softmax_backward(dprobs, aux)
    np.testing.assert_allclose(dlogits, p - onehot, atol=1e-12)


def test_linear_gradient_is_input():
    # y = w . x with loss = y: dloss/dw = x
    g = NetworkGraph((3,))
    g.add("fc", "linear", "input", units=1)
    params = {"fc": {"w": np.array([[0.3, -0.2, 0.5]]), "b": np.zeros(1)}}
    x = np.array([[1.0, 2.0, 3.0]])
    res = forward(g, params, x)
    grads = backward(g, params, res, {"fc": np.ones((1, 1))})
    np.testing.assert_allclose(grads["fc"]["w"], x)


def test_two_layer_net_matches_finite_differences():
    g, params = _toy_net()
    report = finite_diff_check(g, params, np.random.default_rng(1).standard_normal((3, 6, 6, 2)))
    assert report and max(report.values()) <= 1e-3


def test_finite_diff_check_no_parameters():
    g = NetworkGraph((3,))
    g.add("r", "relu", "input")
    g.mark_output("out", "r")
    assert finite_diff_check(g, {}, np.array([[1.0, 2.0, 3.0]])) == {}


def test_corrupted_gradient_flagged_on_exactly_one_group():
    g, params = _toy_net()
    x = np.random.default_rng(2).standard_normal((3, 6, 6, 2))
    probe = {"sm": np.random.default_rng(5).standard_normal((3, 4))}
    res = forward(g, params, x, mode="train", rng=np.random.default_rng(0), nodes=["sm"])
    analytic = backward(g, params, res, probe)
    numeric = numeric_gradients(g, params, x, probe, forward_seed=0)
    analytic["fc"]["w"] *= 2.0  # fault injection
    report = gradient_report(analytic, numeric)
    bad = {k for k, v in report.items() if v > 1e-3}
    assert bad == {"fc.w"}


# -- optimizer -----------------------------------------------------------------


def _scalar_params(w):
    return {"n": {"w": np.array([float(w)])}}


def test_sgd_plain_step():
    p = _scalar_params(1.0)
    sgd_step(p, {"n": {"w": np.array([2.0])}}, OptimizerState(lr=0.1))
    np.testing.assert_allclose(p["n"]["w"], [0.8])


def test_sgd_momentum_two_steps():
    p = _scalar_params(1.0)
    state = OptimizerState(lr=0.1, momentum=0.9)
    sgd_step(p, {"n": {"w": np.array([2.0])}}, state)
    np.testing.assert_allclose(p["n"]["w"], [0.8])
    sgd_step(p, {"n": {"w": np.array([2.0])}}, state)
    # v = 0.9*2 + 2 = 3.8 ; w = 0.8 - 0.38 = 0.42
    np.testing.assert_allclose(p["n"]["w"], [0.42])


def test_sgd_decay_only():
    p = _scalar_params(10.0)
    sgd_step(p, {"n": {"w": np.array([0.0])}}, OptimizerState(lr=1.0, weight_decay=0.1))
    np.testing.assert_allclose(p["n"]["w"], [9.0])


def test_sgd_rejects_nonfinite_gradient():
    p = _scalar_params(1.0)
    with pytest.raises(NonFiniteError, match="n.w"):
        sgd_step(p, {"n": {"w": np.array([np.nan])}}, OptimizerState(lr=0.1))


def test_sgd_leaves_running_stats_alone():
    p = {"bn": {"gamma": np.array([1.0]), "running_mean": np.array([0.5])}}
    g = {"bn": {"gamma": np.array([1.0]), "running_mean": np.array([99.0])}}
    sgd_step(p, g, OptimizerState(lr=0.1, weight_decay=0.5))
    np.testing.assert_allclose(p["bn"]["running_mean"], [0.5])


# -- contracts -----------------------------------------------------------------


def test_forward_rejects_nonfinite_and_bad_shape():
    g, params = _toy_net()
    with pytest.raises(NonFiniteError):
        forward(g, params, np.full((1, 6, 6, 2), np.nan))
    with pytest.raises(ShapeError, match="input"):
        forward(g, params, np.zeros((1, 5, 5, 2)))


def test_backward_missing_activation():
    g, params = _toy_net()
    res = forward(g, params, np.zeros((1, 6, 6, 2)), nodes=["bn1"])
    with pytest.raises(GraphError, match="sm"):
        backward(g, params, res, {"sm": np.zeros((1, 4))})


def test_gradient_set_mirrors_parameter_set():
    g, params = _toy_net()
    x = np.random.default_rng(0).standard_normal((2, 6, 6, 2))
    res = forward(g, params, x, mode="train", rng=np.random.default_rng(0))
    grads = backward(g, params, res, {"sm": np.ones((2, 4))})
    assert set(grads) == set(params)
    for nid in params:
        assert set(grads[nid]) == set(params[nid])
        for key in params[nid]:
            assert grads[nid][key].shape == params[nid][key].shape
            if key in BUFFER_KEYS:
                assert not grads[nid][key].any()


def test_shape_soundness_forward_matches_inference():
    g, params = _toy_net()
    shapes = g.infer_shapes()
    res = forward(g, params, np.zeros((5, 6, 6, 2)), mode="train", rng=np.random.default_rng(0))
    for nid, arr in res.values.items():
        assert arr.shape == (5,) + shapes[nid], nid


def test_determinism_same_seed_same_parameters():
    def run():
        g, params = _toy_net(seed=7)
        rng = np.random.default_rng(11)
        state = OptimizerState(lr=0.05, momentum=0.9, weight_decay=1e-4)
        x = rng.standard_normal((4, 6, 6, 2))
        for _ in range(5):
            res = forward(g, params, x, mode="train", rng=rng, nodes=["sm"])
            grads = backward(g, params, res, {"sm": res["sm"] - np.eye(4)})
            sgd_step(params, grads, state)
        return params

    a, b = run(), run()
    for nid in a:
        for key in a[nid]:
            assert a[nid][key].tobytes() == b[nid][key].tobytes(), f"{nid}.{key}"


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_rows_are_probability_vectors(logits):
    g = NetworkGraph((len(logits),))
    g.add("sm", "softmax", "input")
    p = forward(g, {}, np.array([logits]))["sm"]
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100).filter(lambda v: abs(v) > 1e-3), min_size=2, max_size=16))
def test_power_normalize_unit_mean_square(vals):
    g = NetworkGraph((len(vals),))
    g.add("pn", "power-normalize", "input")
    out = forward(g, {}, np.array([vals]))["pn"]
    assert abs(np.mean(out**2) - 1.0) <= 1e-6


# -- checkpoints -----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    g, params = _toy_net()
    path = tmp_path / "model.ckpt"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(params)
    for nid in params:
        for key, arr in params[nid].items():
            np.testing.assert_allclose(loaded[nid][key], arr.astype(np.float32), rtol=0, atol=0)
    assert path.read_bytes()[:4] == b"BLNK"


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_checkpoint_rejects_unknown_version(tmp_path):
    g, params = _toy_net()
    p = tmp_path / "v9.ckpt"
    save_checkpoint(params, p)
    blob = bytearray(p.read_bytes())
    blob[4:6] = (9).to_bytes(2, "little")
    p.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)


def test_checkpoint_rejects_truncation(tmp_path):
    g, params = _toy_net()
    p = tmp_path / "cut.ckpt"
    save_checkpoint(params, p)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
