"""
Adam with the inverse-square-root warmup schedule, plus global-norm clipping.

Shared by teacher pretraining and student training.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from tensor_core import Parameters
from utils.run_logger import EventLogger, get_event_logger


def lr_at(step: int, d_model: int, warmup_steps: int, scale: float = 1.0) -> float:
    """
    Noam learning rate: d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).

    The branch is chosen explicitly so the two sides meet exactly at
    ``step == warmup_steps``.
    """
    if step < 1:
        raise ValueError(f"learning-rate step must be >= 1, got {step}")
    if warmup_steps < 1:
        raise ValueError(f"warmup_steps must be >= 1, got {warmup_steps}")
    if step >= warmup_steps:
        factor = step ** -0.5
    else:
        factor = step * warmup_steps ** -1.5
    return scale * d_model ** -0.5 * factor


@dataclass
class OptimizerState:
    d_model: int
    warmup_steps: int = 400
    scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    skipped: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self, step: Optional[int] = None) -> float:
        return lr_at(step if step is not None else max(self.step, 1), self.d_model, self.warmup_steps, self.scale)


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> Tuple[Dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm


def adam_step(params: Parameters, grads: Dict[str, np.ndarray], state: OptimizerState,
              logger: Optional[EventLogger] = None) -> bool:
    """
    Apply one bias-corrected Adam update at the scheduled learning rate.

    Returns False (and records a ``step_skipped`` event) when any gradient
    is non-finite; nothing is updated in that case.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")
    if not all(np.isfinite(g).all() for g in grads.values()):
        state.skipped += 1
        print(f"Warning: non-finite gradient at step {state.step + 1}; update skipped")
        (logger or get_event_logger()).log_event("step_skipped", step=state.step + 1, skipped_total=state.skipped)
        return False

    state.step += 1
    t = state.step
    lr = state.lr(t)
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        g = g.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        params.assign(name, params[name].data - update)
    return True
