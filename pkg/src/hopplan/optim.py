"""AdamW with decoupled weight decay, plus the warmup-cosine LR schedule."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Moments are kept per parameter with bias correction; a step with any
    non-finite gradient is skipped entirely and counted in
    ``skipped_steps`` so callers can surface the incident.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 weight_decay: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.skipped_steps = 0
        self.m = {k: np.zeros(p.shape, dtype=np.float32) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape, dtype=np.float32) for k, p in params.items()}

    def step(self, lr: float | None = None) -> bool:
        """Apply one update from the accumulated ``.grad``s.

        Returns False (and counts the incident) if any gradient is
        non-finite; parameters and moments are left untouched in that case.
        """
        lr = self.lr if lr is None else lr
        grads = {}
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros(p.shape, dtype=np.float32)
            if not np.all(np.isfinite(g)):
                self.skipped_steps += 1
                return False
            grads[name] = g
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= np.asarray(
                lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data),
                dtype=np.float32)
        return True

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment arrays under stable names, for checkpointing."""
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.params:
            self.m[name] = arrays[f"opt.m.{name}"].astype(np.float32).copy()
            self.v[name] = arrays[f"opt.v.{name}"].astype(np.float32).copy()
        self.step_count = step_count


def lr_schedule(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    """Linear ramp 0 -> base_lr over warmup, then cosine decay to 0.

    Values are clamped: steps past ``total_steps`` return 0, negative
    progress never occurs.
    """
    if step < 0:
        step = 0
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
