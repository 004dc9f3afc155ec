"""Momentum SGD with additive weight decay.

The update is v <- mu*v + g + wd*w; w <- w - lr*v, which degrades to the plain
stochastic step w <- w - lr*g when mu = wd = 0. Batch-norm running statistics
are state, not weights, and are never touched here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import BUFFER_KEYS, GradientSet, ParameterSet
from .errors import NonFiniteError, TocError


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise TocError(f"learning rate must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise TocError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise TocError(f"weight decay must be >= 0, got {self.weight_decay}")


def sgd_step(params: ParameterSet, grads: GradientSet, state: OptimizerState):
    """One in-place update; returns (params, state) for chaining."""
    for nid, group in params.items():
        for key, w in group.items():
            if key in BUFFER_KEYS:
                continue
            g = grads[nid][key]
            if g.shape != w.shape:
                raise TocError(f"gradient shape mismatch for {nid}.{key}: {g.shape} vs {w.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {nid}.{key}")
            vmap = state.velocity.setdefault(nid, {})
            v = vmap.get(key)
            if v is None:
                v = vmap[key] = np.zeros_like(w)
            v *= state.momentum
            v += g
            if state.weight_decay:
                v += state.weight_decay * w
            w -= state.lr * v
    return params, state
