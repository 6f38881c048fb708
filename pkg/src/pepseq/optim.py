"""AdamW with decoupled weight decay over a ParameterStore.

One shared step counter drives bias correction; moment buffers are keyed by
parameter name and allocated lazily. Frozen partitions are skipped entirely:
their values, and any stale moment buffers, stay bit-identical across steps.
Gradients of updated parameters are cleared after the step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParameterStore

__all__ = ["OptimizerState", "adamw_step"]


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"negative learning rate {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


def adamw_step(
    store: ParameterStore,
    state: OptimizerState,
    unused_ok: frozenset[str] = frozenset(),
) -> None:
    """Apply one AdamW update to every unfrozen parameter with a gradient.

    An unfrozen parameter without a gradient is an error (it means the loss
    graph silently dropped a parameter that was supposed to train) unless
    the caller names it in ``unused_ok`` because the current phase
    legitimately never touches it.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t

    for key, p in store.items():
        partition = key.split("/", 1)[0]
        if store.is_frozen(partition):
            continue
        g = p.grad
        if g is None:
            if key in unused_ok:
                continue
            raise ValueError(f"parameter {key!r} is trainable but received no gradient")
        m = state.m.get(key)
        if m is None or m.shape != p.values.shape:
            m = np.zeros_like(p.values)
            state.v[key] = np.zeros_like(p.values)
        v = state.v[key]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[key] = m
        state.v[key] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        # Decoupled decay: applied to the value directly, not through the
        # gradient moments.
        p.values -= state.lr * (update + state.weight_decay * p.values)
        p.grad = None
