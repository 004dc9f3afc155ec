"""Budgeted batch classification: geometric exit-probability design, expected
cost and its closed form, budget-to-rate inversion, validation-quantile
threshold calibration, and the budgeted inference loop.

The exit distribution weights exit k by r^k (normalized over the K exits), so
the expected per-sample cost R(r) is continuous, strictly increasing in r, and
ranges over (C_1, C_K); inverting it under a budget B for a batch of N samples
is a one-dimensional monotone root find.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamic_model import DynamicPipeline, forward_to_exit
from .engine import ForwardResult, forward
from .errors import InfeasibleBudgetError, TocError

R_MIN = 1e-6
R_MAX = 1e6
_R_ONE_TOL = 1e-9


@dataclass
class CostVector:
    """Per-exit cumulative transmitter costs; strictly increasing, C_1 > 0.

    ``flops_quantum`` carries the per-exit increment of the even-spacing
    idealization when the costs were constructed as C_k = k * quantum.
    """

    costs: np.ndarray
    flops_quantum: float | None = None

    def __post_init__(self):
        self.costs = np.asarray(self.costs, dtype=float)
        if self.costs.ndim != 1 or self.costs.size < 1:
            raise TocError("cost vector must be a non-empty 1-D sequence")
        if self.costs[0] <= 0 or np.any(np.diff(self.costs) <= 0):
            raise TocError(f"exit costs must be positive and strictly increasing: {self.costs}")

    @classmethod
    def uniform(cls, num_exits: int, quantum: float) -> "CostVector":
        if quantum <= 0:
            raise TocError(f"flops quantum must be positive, got {quantum}")
        return cls(quantum * np.arange(1, num_exits + 1), flops_quantum=quantum)

    def __len__(self) -> int:
        return self.costs.size


def _as_costs(costs) -> np.ndarray:
    return costs.costs if isinstance(costs, CostVector) else np.asarray(costs, dtype=float)


def exit_probs(r: float, num_exits: int) -> np.ndarray:
    """Pr_k = r^k / sum_j r^j for k = 1..K, computed in log space."""
    if r <= 0:
        raise TocError(f"rate parameter must be positive, got {r}")
    if num_exits < 2:
        raise TocError(f"need at least 2 exits, got {num_exits}")
    logw = np.arange(1, num_exits + 1) * math.log(r)
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


def expected_cost_uniform(r: float, num_exits: int, quantum: float) -> float:
    """Expected per-sample cost under evenly spaced exits (C_k = k * quantum).

    Closed form quantum * (1 - (K+1) r^K + K r^(K+1)) / ((1-r)(1-r^K));
    the singularity at r = 1 is removable with limit quantum * (K+1)/2.
    """
    if r <= 0:
        raise TocError(f"rate parameter must be positive, got {r}")
    if quantum <= 0:
        raise TocError(f"flops quantum must be positive, got {quantum}")
    k = num_exits
    if abs(r - 1.0) <= _R_ONE_TOL:
        return quantum * (k + 1) / 2.0
    return quantum * (1.0 - (k + 1) * r**k + k * r ** (k + 1)) / ((1.0 - r) * (1.0 - r**k))


def expected_cost(r: float, costs) -> float:
    """Sum_k C_k * Pr_k(r); reduces to the uniform closed form when C_k = k*quantum."""
    c = _as_costs(costs)
    return float(np.dot(c, exit_probs(r, c.size)))


def solve_rate(budget: float, batch: int, costs, gap_rtol: float = 1e-9, max_iter: int = 500) -> float:
    """Largest rate (within [1e-6, 1e6]) whose expected batch cost stays under budget.

    Log-space bisection on the monotone expected cost. Returns r_up with
    N * R(r_up) <= B and N * (B/N - R(r_up)) <= gap_rtol * B. Budgets at or
    above N * C_K saturate at the upper clamp; budgets below N * C_1 are
    infeasible. A budget exactly at N * C_1 returns the lower clamp (R
    approaches C_1 only in the limit r -> 0).
    """
    if budget <= 0 or batch <= 0:
        raise TocError(f"budget and batch size must be positive, got {budget}, {batch}")
    c = _as_costs(costs)
    target = budget / batch
    if target < c[0]:
        raise InfeasibleBudgetError(
            f"budget {budget} gives {target:.6g} per sample, below the cheapest exit cost {c[0]:.6g}"
        )
    if target >= c[-1]:
        return R_MAX
    lo, hi = R_MIN, R_MAX
    if expected_cost(lo, c) > target:
        return lo  # budget sits in the sliver between C_1 and R(R_MIN)
    for _ in range(max_iter):
        if target - expected_cost(lo, c) <= gap_rtol * target:
            break
        mid = math.sqrt(lo * hi)
        if expected_cost(mid, c) <= target:
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class Calibration:
    """Thresholds plus the exact per-exit counts realized on the validation set."""

    thresholds: np.ndarray
    counts: np.ndarray
    cumulative_targets: np.ndarray


def calibrate_thresholds(confidences: np.ndarray, probs) -> Calibration:
    """Sequential quantile calibration of per-exit confidence thresholds.

    ``confidences[j, k]`` is sample j's confidence at exit k+1; only the first
    K-1 columns are consulted (the last exit accepts everything). Cumulative
    targets are rounded up so that shifting any fractional mass lands on a
    cheaper exit, which is what keeps the realized batch cost under budget.
    Ties are broken by ascending sample index. The last threshold is the
    accept-all sentinel -inf; an exit asked to take 0 samples gets +inf.
    """
    probs = np.asarray(probs, dtype=float)
    k_exits = probs.size
    conf = np.asarray(confidences, dtype=float)
    if conf.ndim != 2 or conf.shape[1] < k_exits - 1:
        raise TocError(f"need per-sample confidences for exits 1..{k_exits - 1}, got shape {conf.shape}")
    n = conf.shape[0]
    if n == 0:
        raise TocError("cannot calibrate on an empty validation set")
    if abs(probs.sum() - 1.0) > 1e-9 or np.any(probs < 0):
        raise TocError(f"exit probabilities must be nonnegative and sum to 1, got {probs}")

    cum = np.cumsum(probs) * n
    m = np.minimum(np.ceil(cum - 1e-9).astype(int), n)
    m = np.maximum.accumulate(m)  # guard against float fuzz in cumsum
    m[-1] = n
    counts = np.diff(np.concatenate(([0], m)))

    thresholds = np.empty(k_exits)
    thresholds[-1] = -np.inf
    active = np.arange(n)
    for k in range(k_exits - 1):
        take = int(counts[k])
        if take == 0:
            thresholds[k] = np.inf
            continue
        scores = conf[active, k]
        order = np.lexsort((active, -scores))  # descending score, ascending index on ties
        chosen = order[:take]
        thresholds[k] = scores[chosen].min()
        active = np.delete(active, chosen)
    return Calibration(thresholds=thresholds, counts=counts, cumulative_targets=cum)


@dataclass
class ExitPolicy:
    """A calibrated operating point: rate, exit distribution, and thresholds."""

    r: float
    probs: np.ndarray
    thresholds: np.ndarray
    costs: np.ndarray
    budget: float | None = None
    batch: int | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        self.thresholds = np.asarray(self.thresholds, dtype=float)
        self.costs = np.asarray(self.costs, dtype=float)
        if not (self.probs.size == self.thresholds.size == self.costs.size):
            raise TocError("probs, thresholds, and costs must agree on the number of exits")
        if abs(self.probs.sum() - 1.0) > 1e-9:
            raise TocError(f"exit probabilities must sum to 1, got {self.probs.sum()!r}")

    @property
    def num_exits(self) -> int:
        return self.probs.size

    def save(self, path) -> None:
        payload = {
            "r": self.r,
            "probs": self.probs.tolist(),
            "thresholds": self.thresholds.tolist(),
            "costs": self.costs.tolist(),
            "budget": self.budget,
            "batch": self.batch,
        }
        Path(path).write_text(json.dumps(payload, indent=2))

    @classmethod
    def load(cls, path) -> "ExitPolicy":
        d = json.loads(Path(path).read_text())
        return cls(r=d["r"], probs=d["probs"], thresholds=d["thresholds"],
                   costs=d["costs"], budget=d.get("budget"), batch=d.get("batch"))


def design_policy(budget: float, batch: int, costs, confidences: np.ndarray) -> ExitPolicy:
    """solve_rate + exit_probs + calibrate_thresholds in one step."""
    c = _as_costs(costs)
    r = solve_rate(budget, batch, c)
    probs = exit_probs(r, c.size)
    cal = calibrate_thresholds(confidences, probs)
    return ExitPolicy(r=r, probs=probs, thresholds=cal.thresholds, costs=c,
                      budget=budget, batch=batch)


@dataclass
class BudgetedRunResult:
    exit_indices: np.ndarray    # (N,) 1-based exit used per sample
    predictions: np.ndarray     # (N,) argmax class per sample
    accuracy: float
    avg_tx_flops: float
    histogram: np.ndarray       # (K,) samples per exit


def _slice_cache(res: ForwardResult, rows: np.ndarray) -> ForwardResult:
    # Values-only cache (no tape): enough for eval-mode continuation.
    return ForwardResult(values={k: v[rows] for k, v in res.values.items()}, mode=res.mode)


def budgeted_run(pipeline: DynamicPipeline, images: np.ndarray, labels: np.ndarray,
                 thresholds, costs, rng: np.random.Generator | None = None,
                 channel=None) -> BudgetedRunResult:
    """Per-sample early-exit inference under calibrated thresholds.

    Each sample leaves at the first exit whose confidence clears its threshold
    (the last exit takes whatever remains); only then is its feature pushed
    through that exit's codec and channel for the receiver-side prediction.
    Later trunk stages are evaluated only for samples still undecided, reusing
    the cached activations of earlier stages.
    """
    graph, params = pipeline.graph, pipeline.params
    exits = graph.meta["exits"]
    k_exits = len(exits)
    thresholds = np.asarray(thresholds, dtype=float)
    if thresholds.size != k_exits:
        raise TocError(f"expected {k_exits} thresholds, got {thresholds.size}")
    c = _as_costs(costs)
    n = len(images)
    if n == 0:
        raise TocError("cannot run on an empty split")
    rng = rng or np.random.default_rng(0)

    exit_of = np.zeros(n, dtype=int)
    preds = np.zeros(n, dtype=int)
    active = np.arange(n)
    cache: ForwardResult | None = None
    x_active = np.asarray(images)

    for k in range(1, k_exits + 1):
        ex_out, cache = forward_to_exit(graph, params, x_active, k, cache=cache)
        leaving = np.ones(active.size, dtype=bool) if k == k_exits else ex_out.confidence >= thresholds[k - 1]
        if np.any(leaving):
            rows = np.flatnonzero(leaving)
            zhat_node = exits[k - 1]["zhat"]
            sub = forward(graph, params, x_active[rows], mode="eval", rng=rng,
                          nodes=[zhat_node], cache=_slice_cache(cache, rows),
                          channel_override=channel)
            preds[active[rows]] = np.argmax(sub[zhat_node], axis=1)
            exit_of[active[rows]] = k
        if k < k_exits:
            staying = np.flatnonzero(~leaving)
            if staying.size == 0:
                break
            active = active[staying]
            x_active = x_active[staying]
            cache = _slice_cache(cache, staying)

    histogram = np.bincount(exit_of - 1, minlength=k_exits)
    accuracy = float(np.mean(preds == np.asarray(labels)))
    avg_flops = float(np.mean(c[exit_of - 1]))
    return BudgetedRunResult(exit_indices=exit_of, predictions=preds, accuracy=accuracy,
                             avg_tx_flops=avg_flops, histogram=histogram)
