"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autograd import Tensor, no_grad


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, index, h: float = 1e-5) -> float:
    flat = param.data.reshape(-1)
    orig = flat[index]
    with no_grad():
        flat[index] = orig + h
        up = fn().item()
        flat[index] = orig - h
        down = fn().item()
    flat[index] = orig
    return (up - down) / (2 * h)


def check_gradients(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    samples_per_param: int | None = None,
    floor: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Relative error per parameter: max|analytic - numeric| / max(|gradient|, floor).

    The floor keeps parameters whose true gradient is zero (for example a key
    bias under softmax shift invariance) from dividing noise by noise.
    ``samples_per_param`` limits how many coordinates of each parameter are
    probed; ``None`` probes them all.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    fn().backward()
    errors = {}
    for name, p in params.items():
        analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1)
        if samples_per_param is None or samples_per_param >= p.size:
            idx = np.arange(p.size)
        else:
            idx = rng.choice(p.size, samples_per_param, replace=False)
        numeric = np.array([numeric_grad(fn, p, int(i), h) for i in idx])
        scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic[idx]).max(initial=0.0), floor)
        errors[name] = float(np.abs(analytic[idx] - numeric).max(initial=0.0) / scale)
    return errors
