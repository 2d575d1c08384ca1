import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class OptimizerAbort(RuntimeError):
    pass


@dataclass
class AdamState:
    """Moments for a dict of named parameter arrays."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0
    consecutive_skips: int = 0
    max_consecutive_skips: int = 10


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> dict:
    """One bias-corrected Adam update; returns new arrays and leaves ``params`` untouched.

    A non-finite gradient skips the update (counted); ten skips in a row raise.
    """
    for k, p in params.items():
        if grads[k].shape != np.shape(p):
            raise ValueError(f"gradient for {k!r} has shape {grads[k].shape}, parameter {np.shape(p)}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        state.consecutive_skips += 1
        log.warning("non-finite gradient, update skipped (%d in a row)", state.consecutive_skips)
        if state.consecutive_skips >= state.max_consecutive_skips:
            raise OptimizerAbort(f"{state.consecutive_skips} consecutive non-finite gradients")
        return dict(params)
    state.consecutive_skips = 0
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m.get(k, np.zeros_like(g)) + (1.0 - b1) * g
        v = b2 * state.v.get(k, np.zeros_like(g)) + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out
