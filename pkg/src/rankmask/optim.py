"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor


class StateCorruptionError(RuntimeError):
    """Optimizer moment buffers no longer match their parameter."""


@dataclass
class AdamW:
    """Bias-corrected Adam update with weight decay applied directly to
    the parameter (not mixed into the gradient)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    moments: dict = field(default_factory=dict)  # tid -> (m, v)

    def step(self, params: list[Tensor], grads: dict) -> None:
        """Apply one update in place.  ``grads`` maps tensor id -> gradient
        (Tensor or ndarray), as returned by ``Tape.gradient``."""
        for p in params:
            if p.tid not in grads:
                raise ContractError(f"optimizer step: no gradient for tensor {p.tid}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p in params:
            g = grads[p.tid]
            g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
            if g.shape != p.data.shape:
                raise StateCorruptionError(
                    f"gradient shape {g.shape} does not match parameter {p.data.shape}"
                )
            m, v = self.moments.get(p.tid, (None, None))
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            if m.shape != p.data.shape:
                raise StateCorruptionError(
                    f"moment shape {m.shape} does not match parameter {p.data.shape}"
                )
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.moments[p.tid] = (m, v)
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data - self.lr * (
                mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data
            )
