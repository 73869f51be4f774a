"""AdamW with decoupled weight decay, and the warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ropim.errors import TrainingError


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear ramp 0 -> base_lr over the warmup, then cosine decay to 0."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float,
               beta1: float = 0.9, beta2: float = 0.95, weight_decay: float = 0.05,
               eps: float = 1e-8, decay_mask: dict | None = None) -> None:
    """Update ``params`` (name -> ndarray) in place.

    ``decay_mask`` maps names to whether weight decay applies; missing names
    decay. Raises TrainingError before touching anything if a grad is not finite.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if p.shape != g.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay and (decay_mask is None or decay_mask.get(name, True)):
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def decays(name: str, shape) -> bool:
    """Weight decay only on 2-D weight matrices, not on biases, norms or embeddings."""
    return len(shape) == 2 and name.endswith(".weight")
