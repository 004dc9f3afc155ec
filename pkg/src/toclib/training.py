"""End-to-end training of static and dynamic pipelines, plus the SGD
convergence diagnostic on a controlled noisy quadratic.

Each step draws a fresh channel realization, treats the draw as a constant
during backward, and updates all parameters jointly. The dynamic objective
sums per-exit receiver cross-entropies (weights omega_k); the transmitter
confidence heads are trained with the same per-exit cross-entropy so their
max-softmax scores track sample difficulty.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import ChannelSpec
from .engine import backward, forward
from .errors import ShapeError, TocError, TrainingDivergedError
from .flops import profile_graph
from .optim import OptimizerState, sgd_step

CE_CLAMP = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 164
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.1
    seed: int = 0
    loss_weights: tuple | None = None      # omega_k; defaults to all-ones
    conf_loss_weight: float = 1.0          # transmitter confidence-head CE weight
    lr_milestones: tuple = ()              # epochs at which lr is scaled by lr_gamma
    lr_gamma: float = 0.1
    checkpoint_every: int | None = None
    checkpoint_dir: str | None = None
    flops_convention: str = "conv-linear"
    precision: str = "f64"                 # f32 roughly halves desk training time

    @property
    def dtype(self):
        if self.precision not in ("f32", "f64"):
            raise TocError(f"precision must be f32 or f64, got {self.precision!r}")
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class TrainTrace:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    grad_norm_sq: list = field(default_factory=list)   # one entry per step
    lr: list = field(default_factory=list)
    wall_time: float = 0.0

    def epoch_grad_norms(self) -> list:
        steps = len(self.grad_norm_sq) // max(1, len(self.epochs))
        return [float(np.mean(self.grad_norm_sq[i * steps : (i + 1) * steps])) for i in range(len(self.epochs))]

    def save_csv(self, path) -> None:
        gnorm = self.epoch_grad_norms()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "split", "loss", "grad_norm_sq", "lr"])
            for i, e in enumerate(self.epochs):
                w.writerow([e, "train", repr(self.train_loss[i]), repr(gnorm[i]), repr(self.lr[i])])
                w.writerow([e, "val", repr(self.val_loss[i]), "", repr(self.lr[i])])


@dataclass
class TrainResult:
    params: dict
    trace: TrainTrace
    flops_min: int
    flops_max: int


def cross_entropy_with_grad(probs: np.ndarray, onehot: np.ndarray, weight: float = 1.0):
    """Mean CE over the batch and its gradient w.r.t. the probabilities."""
    if probs.shape != onehot.shape:
        raise ShapeError(f"predictions {probs.shape} and labels {onehot.shape} disagree")
    n = probs.shape[0]
    clamped = np.maximum(probs, CE_CLAMP)
    loss = float(-np.sum(onehot * np.log(clamped)) / n)
    grad = -(weight / n) * onehot / clamped
    return weight * loss, grad


def dynamic_loss(per_exit_preds, onehot: np.ndarray, weights=None) -> float:
    """Weighted sum over exits of the receiver cross-entropy (one channel draw each)."""
    k = len(per_exit_preds)
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=float)
    if w.size != k:
        raise TocError(f"got {k} exit predictions but {w.size} loss weights")
    total = 0.0
    for zhat, wk in zip(per_exit_preds, w):
        loss, _ = cross_entropy_with_grad(np.asarray(zhat), onehot, weight=float(wk))
        total += loss
    return total


def _loss_targets(graph, cfg: TrainConfig):
    """(node, weight) pairs whose CE against the labels forms the objective."""
    exits = graph.meta["exits"]
    w = np.ones(len(exits)) if cfg.loss_weights is None else np.asarray(cfg.loss_weights, dtype=float)
    if w.size != len(exits):
        raise TocError(f"{len(exits)} exits but {w.size} loss weights")
    targets = []
    for ex, wk in zip(exits, w):
        targets.append((ex["zhat"], float(wk)))
        if ex.get("conf_prob") and cfg.conf_loss_weight:
            targets.append((ex["conf_prob"], float(wk) * cfg.conf_loss_weight))
    return targets


def _grad_sq(grads) -> float:
    return float(sum(float(np.sum(g * g)) for group in grads.values() for g in group.values()))


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    drops = sum(1 for m in cfg.lr_milestones if epoch >= m)
    return cfg.lr * cfg.lr_gamma**drops


def evaluate_loss(pipeline, images, labels_onehot, rng=None, channel: ChannelSpec | None = None,
                  cfg: TrainConfig | None = None, batch_size: int = 512) -> float:
    """Objective value in eval mode (running statistics, fresh channel draws)."""
    cfg = cfg or TrainConfig()
    graph, params = pipeline.graph, pipeline.params
    targets = _loss_targets(graph, cfg)
    nodes = [t for t, _ in targets]
    total, count = 0.0, 0
    for lo in range(0, len(images), batch_size):
        xb = images[lo : lo + batch_size]
        yb = labels_onehot[lo : lo + batch_size]
        res = forward(graph, params, xb, mode="eval", rng=rng, nodes=nodes, channel_override=channel)
        batch_loss = sum(cross_entropy_with_grad(res[t], yb, weight=w)[0] for t, w in targets)
        total += batch_loss * len(xb)
        count += len(xb)
    return total / count


def train(pipeline, images, labels_onehot, cfg: TrainConfig,
          val_images=None, val_labels_onehot=None, augment_fn=None) -> TrainResult:
    """Joint SGD over encoder, codec, and receiver parameters.

    Minibatches are reshuffled every epoch; the channel is resampled per batch
    at the configured operating point. Raises TrainingDivergedError (carrying
    the trace so far) the moment the objective goes non-finite.
    """
    graph, params = pipeline.graph, pipeline.params
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    targets = _loss_targets(graph, cfg)
    nodes = [t for t, _ in targets]
    trace = TrainTrace()
    n = len(images)
    images = np.asarray(images, dtype=cfg.dtype)
    labels_onehot = np.asarray(labels_onehot, dtype=cfg.dtype)
    if val_labels_onehot is not None:
        val_labels_onehot = np.asarray(val_labels_onehot, dtype=cfg.dtype)
    started = time.perf_counter()

    for epoch in range(1, cfg.epochs + 1):
        state.lr = _epoch_lr(cfg, epoch)
        order = rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            xb = images[idx]
            if augment_fn is not None:
                xb = augment_fn(xb, rng)
            yb = labels_onehot[idx]
            res = forward(graph, params, xb, mode="train", rng=rng, nodes=nodes)
            loss = 0.0
            grad_map = {}
            for t, w in targets:
                l, g = cross_entropy_with_grad(res[t], yb, weight=w)
                loss += l
                grad_map[t] = g
            if not np.isfinite(loss):
                trace.wall_time = time.perf_counter() - started
                raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}", trace=trace)
            grads = backward(graph, params, res, grad_map)
            sgd_step(params, grads, state)
            epoch_losses.append(loss)
            trace.grad_norm_sq.append(_grad_sq(grads))

        trace.epochs.append(epoch)
        trace.train_loss.append(float(np.mean(epoch_losses)))
        trace.lr.append(state.lr)
        if val_images is not None and len(val_images):
            vl = evaluate_loss(pipeline, val_images, val_labels_onehot, rng=rng, cfg=cfg)
        else:
            vl = float("nan")
        trace.val_loss.append(vl)

        if cfg.checkpoint_every and cfg.checkpoint_dir and epoch % cfg.checkpoint_every == 0:
            from .checkpoint import save_checkpoint

            Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(params, Path(cfg.checkpoint_dir) / f"epoch{epoch:04d}.ckpt")

    trace.wall_time = time.perf_counter() - started
    profile = profile_graph(graph, convention=cfg.flops_convention)
    return TrainResult(params=params, trace=trace,
                       flops_min=profile.flops_min, flops_max=profile.flops_max)


# -- channel gradient semantics ------------------------------------------------


@dataclass(frozen=True)
class ChannelGradientMode:
    kind: str
    scales_by_gain: bool     # backward multiplies by the drawn fade
    noise_contributes: bool  # additive noise never carries gradient


def channel_gradient_mode(spec: ChannelSpec) -> ChannelGradientMode:
    """Backward behaviour of the channel hop: identity for AWGN/noiseless,
    gain-scaled for Rayleigh; the noise term contributes nothing."""
    return ChannelGradientMode(kind=spec.kind, scales_by_gain=spec.kind == "rayleigh",
                               noise_contributes=False)


# -- convergence diagnostic ------------------------------------------------------


@dataclass
class ConvergenceReport:
    t_grid: list
    mean_grad_sq: list
    scaled: list          # sqrt(T) * mean ||grad f(g_T)||^2
    slope: float          # log-log fit of mean_grad_sq vs T
    ratio: float          # max/min of the scaled values
    bound_constant: float  # empirical D-hat = max scaled value


def run_noisy_quadratic(t_steps: int, alpha: float, reps: int, dim: int,
                        noise_std: float, w0_norm: float, rng: np.random.Generator):
    """SGD on f(w) = 0.5||w||^2 with gradient noise; returns per-rep
    ||grad f(g_T)||^2 samples (g_T drawn uniformly over the trajectory) and the
    final exact gradient norms."""
    w = np.full((reps, dim), w0_norm / np.sqrt(dim))
    t_pick = rng.integers(t_steps, size=reps)
    g_samples = np.zeros(reps)
    for t in range(t_steps):
        hit = t_pick == t
        if np.any(hit):
            g_samples[hit] = np.sum(w[hit] ** 2, axis=1)
        noise = rng.standard_normal((reps, dim)) * noise_std if noise_std else 0.0
        w = w - alpha * (w + noise)
    return g_samples, np.sum(w**2, axis=1)


def convergence_diagnostic(t_grid=(100, 1000, 10000), d: float = 1.0, reps: int = 20,
                           dim: int = 10, noise_std: float = 1.0, w0_norm: float = 1.0,
                           seed: int = 0) -> ConvergenceReport:
    """Empirical check of the 1/sqrt(T) rate: run SGD with step size d/sqrt(T)
    on a noisy quadratic, draw g_T uniformly from each trajectory, and report
    sqrt(T)-scaled mean squared gradient norms plus the fitted log-log slope.
    """
    if any(t <= 0 for t in t_grid) or d <= 0 or reps < 1:
        raise TocError("t_grid entries, d, and reps must be positive")
    rng = np.random.default_rng(seed)
    means, scaled = [], []
    for t_steps in t_grid:
        alpha = d / np.sqrt(t_steps)
        g, _ = run_noisy_quadratic(int(t_steps), alpha, reps, dim, noise_std, w0_norm, rng)
        m = float(np.mean(g))
        means.append(m)
        scaled.append(m * np.sqrt(t_steps))
    slope = float(np.polyfit(np.log(np.asarray(t_grid, dtype=float)), np.log(means), 1)[0])
    return ConvergenceReport(t_grid=list(t_grid), mean_grad_sq=means, scaled=scaled,
                             slope=slope, ratio=float(max(scaled) / min(scaled)),
                             bound_constant=float(max(scaled)))


def trace_gradient_summary(trace: TrainTrace) -> dict:
    """Descriptive gradient-norm statistics from a training trace (no bound is
    asserted here: the smoothness assumptions only approximately hold for ReLU
    networks)."""
    g = np.asarray(trace.grad_norm_sq, dtype=float)
    if g.size == 0:
        raise TocError("trace has no recorded gradient norms")
    thirds = np.array_split(g, 3)
    return {
        "steps": int(g.size),
        "mean": float(g.mean()),
        "first_third_mean": float(thirds[0].mean()),
        "last_third_mean": float(thirds[-1].mean()),
        "decreased": bool(thirds[-1].mean() < thirds[0].mean()),
    }
