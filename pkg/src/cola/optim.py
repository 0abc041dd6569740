"""SGD with momentum and the two cosine learning-rate schedules.

The optimizer is functional: a step consumes (model, gradients, state) and
returns fresh parameter and state values. The learning rate is resolved
from the schedule at the pre-step counter, so step 0 trains at the base
rate under cosine annealing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .model import Gradients, MHModel, Model, ShapeMismatch


@dataclass(frozen=True)
class CosineAnneal:
    """lr(step) = base * (1 + cos(pi * step / total)) / 2."""

    total_steps: int


@dataclass(frozen=True)
class CosineWarmup:
    """Linear 0 -> base over the warmup, then cosine annealing to 0."""

    warmup_steps: int
    total_steps: int


Schedule = CosineAnneal | CosineWarmup


@dataclass
class OptState:
    """Momentum buffers plus the step counter and schedule."""

    base_lr: float
    momentum: float
    schedule: Schedule
    velocity: list[np.ndarray]
    step: int = 0


def init_opt_state(model: Model | MHModel, base_lr: float, momentum: float,
                   schedule: Schedule) -> OptState:
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if base_lr <= 0:
        raise ValueError(f"base learning rate must be positive, got {base_lr}")
    velocity = [np.zeros_like(p) for p in model.flat_params()]
    return OptState(base_lr=base_lr, momentum=momentum, schedule=schedule, velocity=velocity)


def schedule_lr(state: OptState) -> float:
    """Learning rate at the state's current (pre-step) counter."""
    step = state.step
    sched = state.schedule
    if isinstance(sched, CosineWarmup):
        if step < sched.warmup_steps:
            return state.base_lr * step / sched.warmup_steps
        span = max(sched.total_steps - sched.warmup_steps, 1)
        frac = (step - sched.warmup_steps) / span
        return state.base_lr * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))
    frac = step / sched.total_steps if sched.total_steps else 1.0
    return state.base_lr * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


def _stepped_params(params: list[np.ndarray], grads: list[np.ndarray],
                    state: OptState) -> tuple[list[np.ndarray], list[np.ndarray]]:
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise ShapeMismatch("gradient structure does not match the model")
    lr = schedule_lr(state)
    new_params, new_velocity = [], []
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} vs parameter shape {p.shape}")
        v_next = state.momentum * v + g
        new_params.append(p - lr * v_next)
        new_velocity.append(v_next)
    return new_params, new_velocity


def sgd_step(model: Model, grads: Gradients, state: OptState) -> tuple[Model, OptState]:
    """v' = momentum * v + g; p' = p - lr * v'. Returns new model and state."""
    new_params, new_velocity = _stepped_params(model.flat_params(), grads.flat_params(), state)
    n_backbone = len(model.backbone)
    backbone = [(new_params[2 * i], new_params[2 * i + 1]) for i in range(n_backbone)]
    head = (new_params[2 * n_backbone], new_params[2 * n_backbone + 1])
    new_state = replace(state, velocity=new_velocity, step=state.step + 1)
    return Model(backbone=backbone, head=head), new_state


def mh_sgd_step(mh: MHModel, flat_grads: list[np.ndarray], state: OptState) -> tuple[MHModel, OptState]:
    """SGD step over a multi-head model's flattened parameter list."""
    new_params, new_velocity = _stepped_params(mh.flat_params(), flat_grads, state)
    n_backbone = len(mh.backbone)
    backbone = [(new_params[2 * i], new_params[2 * i + 1]) for i in range(n_backbone)]
    heads = {}
    cursor = 2 * n_backbone
    for name in sorted(mh.heads):
        heads[name] = (new_params[cursor], new_params[cursor + 1])
        cursor += 2
    new_state = replace(state, velocity=new_velocity, step=state.step + 1)
    return MHModel(backbone=backbone, heads=heads), new_state
