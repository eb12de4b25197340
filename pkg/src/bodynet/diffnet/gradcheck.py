"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParameterSet
from .tensor import Tensor


def finite_diff_check(
    f: Callable[[], Tensor],
    params: ParameterSet,
    epsilon: float = 1e-6,
    names: list[str] | None = None,
    max_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
    inputs: dict[str, Tensor] | None = None,
    kink_retries: int = 0,
) -> float:
    """Worst elementwise relative error between backprop and central differences.

    ``f`` must rebuild its graph from the current parameter values on every
    call and be deterministic (dropout off).  The relative error of an
    element is ``|a - n| / max(|a|, |n|, 1e-8)``.  ``max_per_tensor`` limits
    the check to a random subset of elements of each tensor.  ``inputs``
    adds extra leaf tensors (e.g. layer inputs) to the check.

    Piecewise-linear operations (ReLU, max pooling) make ``f`` non-smooth at
    isolated points, and a central difference straddling one measures
    nothing useful.  With ``kink_retries > 0`` an element whose forward and
    backward one-sided slopes disagree sharply is re-measured with a ten
    times smaller step, up to that many times.  The test looks only at
    ``f``, never at the analytic gradient.
    """
    targets: list[tuple[str, Tensor]] = [
        (n, t) for n, t in params.trainable() if names is None or n in names
    ]
    if inputs:
        targets += list(inputs.items())
    for n, t in targets:
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"non-finite values in {n}")
        t.grad = None
    loss = f()
    if loss.size != 1:
        raise ValueError(f"f must return a scalar, got shape {loss.shape}")
    if not np.isfinite(loss.item()):
        raise ValueError("f returned a non-finite value")
    loss.backward()
    f0 = loss.item()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, t in targets:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx = rng.choice(flat.size, size=max_per_tensor, replace=False)
        for i in idx:
            numeric = _central(f, flat, int(i), epsilon, kink_retries, name, f0)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def _central(
    f: Callable[[], Tensor], flat: np.ndarray, i: int, eps: float, retries: int, name: str, f0: float
) -> float:
    orig = flat[i]
    for attempt in range(retries + 1):
        flat[i] = orig + eps
        fp = f().item()
        flat[i] = orig - eps
        fm = f().item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite value while perturbing {name}[{i}]")
        if attempt == retries:
            break
        fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
        if abs(fwd - bwd) <= 1e-3 * max(abs(fwd), abs(bwd)) + 1e-7:
            break
        eps /= 10.0
    return (fp - fm) / (2.0 * eps)
