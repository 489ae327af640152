"""Adam optimizer and reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import EngineError


class AdamState:
    """Per-parameter first/second moments plus the shared step counter.

    Moment buffers mirror the parameter registry lazily: they are created
    on the first step that sees each parameter name.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}


def adam_step(params, state, grads=None):
    """One bias-corrected Adam update, in place on ``params``.

    ``params`` maps name -> Tensor. Gradients come from ``grads`` (name ->
    array) when given, else from each tensor's ``.grad``; a missing
    gradient is treated as zero (the parameter still decays its moments).
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if g is None:
            m *= b1
            v *= b2
        else:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


@dataclass
class PlateauSchedule:
    """Reduce-on-plateau rule for the learning rate.

    The first observation always counts as an improvement (baseline +inf);
    afterwards a metric must undercut the best seen by ``min_delta`` to
    reset the wait counter. Once ``wait`` reaches ``patience`` the rate is
    multiplied by ``factor`` (clamped at ``min_lr``) and the counter
    restarts.
    """

    lr: float = 1e-3
    factor: float = 0.5
    patience: int = 5
    min_delta: float = 1e-4
    min_lr: float = 1e-6
    best: float = float("inf")
    wait: int = 0
    history: list = field(default_factory=list)

    def state_dict(self):
        return {
            "lr": self.lr,
            "factor": self.factor,
            "patience": self.patience,
            "min_delta": self.min_delta,
            "min_lr": self.min_lr,
            "best": self.best,
            "wait": self.wait,
            "history": list(self.history),
        }

    @classmethod
    def from_state(cls, d):
        return cls(**d)


def plateau_step(schedule, epoch_metric):
    """Fold one epoch's monitored metric into the schedule."""
    if not np.isfinite(epoch_metric):
        raise EngineError(f"plateau_step got a non-finite metric: {epoch_metric}")
    schedule.history.append(float(epoch_metric))
    if epoch_metric < schedule.best - schedule.min_delta:
        schedule.best = float(epoch_metric)
        schedule.wait = 0
    else:
        schedule.wait += 1
        if schedule.wait >= schedule.patience:
            schedule.lr = max(schedule.lr * schedule.factor, schedule.min_lr)
            schedule.wait = 0
    return schedule
