"""Adam with decoupled weight decay and a linear learning-rate warm-up."""

from __future__ import annotations

import math

import numpy as np

from .autograd import ContractError, Tensor


def warmup_factor(step: int, warmup_steps: int, start: float = 0.01) -> float:
    """Linear ramp from ``start`` at step 0 to 1.0 at ``warmup_steps``."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return 1.0
    return start + (1.0 - start) * step / warmup_steps


def warmup_steps_for(total_steps: int, fraction: float = 0.1) -> int:
    return max(1, math.ceil(fraction * total_steps)) if total_steps > 0 else 0


class Adam:
    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 3.5e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
        warmup_steps: int = 0,
        warmup_start: float = 0.01,
    ):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.warmup_start = warmup_start
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def current_lr(self) -> float:
        return self.lr * warmup_factor(self.step_count, self.warmup_steps, self.warmup_start)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractError(f"no gradient for parameters: {missing}")
        lr = self.current_lr()
        b1, b2 = self.betas
        t = self.step_count + 1
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for k, p in self.params.items():
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.step_count = t

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        self.m = {k: np.array(state["m"][k], dtype=np.float64) for k in self.params}
        self.v = {k: np.array(state["v"][k], dtype=np.float64) for k in self.params}
