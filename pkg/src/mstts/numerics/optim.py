"""Adam, learning-rate schedule, weight-decay penalty, EMA shadow weights."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Tensor


class NonFiniteGradient(RuntimeError):
    """A gradient contained NaN or Inf; carries the offending parameter name."""


@dataclass
class LrSchedule:
    """Constant lr until ``decay_start_step``, then exponential decay with a floor.

    ``decay_rate`` is the per-step multiplier.  Left unset it is chosen so the
    floor is reached at 4x the decay start (i.e. after 3x decay_start_step
    decaying steps), which for the defaults means 1e-3 down to 1e-5 by step
    200000.  ``initial_lr == min_lr`` yields a constant schedule.
    """

    initial_lr: float = 1e-3
    decay_start_step: int = 50000
    min_lr: float = 1e-5
    decay_rate: float | None = None

    def __post_init__(self):
        if not (0.0 < self.min_lr <= self.initial_lr):
            raise ValueError("need 0 < min_lr <= initial_lr")
        if self.decay_rate is None:
            span = max(3 * self.decay_start_step, 1)
            self.decay_rate = float((self.min_lr / self.initial_lr) ** (1.0 / span))
        if not (0.0 < self.decay_rate <= 1.0):
            raise ValueError("decay_rate must be in (0, 1]")


def lr_at(step: int, sched: LrSchedule) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if step <= sched.decay_start_step:
        return sched.initial_lr
    lr = sched.initial_lr * sched.decay_rate ** (step - sched.decay_start_step)
    return max(lr, sched.min_lr)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One Adam update, in place on every parameter's array.

    Moment buffers are created lazily on first sight of a name.  Every update
    is checked: a non-finite gradient or resulting parameter raises before any
    further state is touched, so the caller can abort and keep its last good
    checkpoint.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteGradient(f"parameter {name!r} became non-finite after update")


def clip_global_norm(grads: dict, max_norm: float):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns (clipped grads dict, pre-clip norm).
    """
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = float(np.sqrt(total))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def l2_penalty(params: dict, weight: float) -> Tensor | None:
    """weight * sum of squares over weight matrices (names ending in ".w").

    Biases, gains and lookup tables are left alone.  Returns None when the
    weight is zero or nothing matches, so callers can skip the add.
    """
    if weight == 0.0:
        return None
    total = None
    for name, p in params.items():
        if not name.endswith(".w"):
            continue
        sq = ops.sum_(ops.mul(p, p))
        total = sq if total is None else ops.add(total, sq)
    if total is None:
        return None
    return ops.mul(total, weight)


@dataclass
class EmaState:
    decay: float = 0.9999
    shadow: dict = field(default_factory=dict)


def ema_init(params: dict, decay: float = 0.9999) -> EmaState:
    return EmaState(decay=decay, shadow={k: p.data.copy() for k, p in params.items()})


def ema_update(params: dict, state: EmaState) -> None:
    """shadow <- decay * shadow + (1 - decay) * param, seeded with a copy."""
    d = state.decay
    for name, p in params.items():
        s = state.shadow.get(name)
        if s is None:
            state.shadow[name] = p.data.copy()
        else:
            s *= d
            s += (1.0 - d) * p.data
