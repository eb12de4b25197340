"""Adam with bias-corrected moment estimates."""

from __future__ import annotations

import numpy as np

from .params import ParameterSet


class MissingGradientError(RuntimeError):
    pass


class Adam:
    """Adam optimizer; moment buffers persist across :meth:`step` calls.

    Parameters without a populated gradient raise :class:`MissingGradientError`
    unless ``allow_missing`` is set, in which case they are left untouched.
    """

    def __init__(
        self,
        params: ParameterSet,
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        allow_missing: bool = False,
    ):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.allow_missing = allow_missing
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.step_count += 1
        adam_step(self.params, self.lr, self.betas, self.eps, self.step_count,
                  self.m, self.v, self.allow_missing)


def adam_step(
    params: ParameterSet,
    lr: float,
    betas: tuple[float, float],
    eps: float,
    step_count: int,
    m: dict[str, np.ndarray],
    v: dict[str, np.ndarray],
    allow_missing: bool = False,
) -> None:
    """Apply one in-place Adam update at (1-based) ``step_count``."""
    b1, b2 = betas
    trainable = params.trainable()
    if not allow_missing:
        for name, p in trainable:
            if p.grad is None:
                raise MissingGradientError(f"parameter {name!r} has no gradient")
    c1 = 1.0 - b1**step_count
    c2 = 1.0 - b2**step_count
    for name, p in trainable:
        g = p.grad
        if g is None:
            continue
        if name not in m:
            m[name] = np.zeros_like(p.data)
            v[name] = np.zeros_like(p.data)
        m[name] *= b1
        m[name] += (1.0 - b1) * g
        v[name] *= b2
        v[name] += (1.0 - b2) * g * g
        p.data -= lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + eps)
