"""Finite-difference suite over every layer kind and the full objective of each ablation variant."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diffnet import tensor as T
from .diffnet.gradcheck import finite_diff_check
from .diffnet.layers import (
    LayerSpec,
    batchnorm_forward,
    conv1d_block_forward,
    dropout_forward,
    gru_forward,
    init_batchnorm,
    init_conv1d_block,
    init_gru,
    init_linear,
    init_multihead_attention,
    linear_forward,
    maxpool_forward,
    multihead_attention_forward,
)
from .diffnet.params import ParameterSet
from .diffnet.tensor import Tensor
from .model import (
    ABLATION_VARIANTS,
    AblationConfig,
    LossWeights,
    ModelConfig,
    forward,
    init_model,
    total_loss,
)

LAYER_THRESHOLD = 1e-4
LOSS_THRESHOLD = 1e-3

# Tiny network for the objective checks.  The encoders skip max pooling
# (pooling has its own layer check): after a pool a channel can be positive
# at every selected position, and then its batch-norm shift only adds a
# constant that the next batch norm removes, so its true gradient is exactly
# zero and central differences return pure rounding noise.
GRADCHECK_MODEL = ModelConfig(
    window=32, channels=(4, 4, 4, 4, 4, 4), pool_blocks=0, segments=2,
    gru_hidden=3, d_loc=4, heads=2, h_loc=3, dropout=0.0,
)


@dataclass
class CheckRow:
    component: str
    max_rel_error: float
    threshold: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold


def _weighted_sum(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """Random fixed projection so every output element carries a distinct weight."""
    return Tensor(rng.normal(size=out.shape))


def _corrupted(f: Callable[[], Tensor], params: ParameterSet) -> Callable[[], Tensor]:
    """Add a term with value 0 but gradient 0.1 for every parameter (test hook)."""

    def g():
        out = f()
        for _, p in params.trainable():
            out = out + T.tsum(p - T.stop_gradient(p)) * 0.1
        return out

    return g


def _layer_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], ParameterSet, dict]]:
    cases = {}

    p = ParameterSet()
    init_linear(p, "fc", 5, 3, rng)
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    w = _weighted_sum(Tensor(np.zeros((4, 3))), rng)
    cases["linear"] = (lambda p=p, x=x, w=w: T.tsum(linear_forward(x, p, "fc") * w), p, {"x": x})

    p = ParameterSet()
    spec = LayerSpec("conv1d_block", "blk", 3, 4, kernel=3, pool=2)
    init_conv1d_block(p, spec, rng)
    x = Tensor(rng.normal(size=(3, 3, 17)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 4, 7)))
    cases["conv1d_block"] = (
        lambda p=p, x=x, w=w, spec=spec: T.tsum(conv1d_block_forward(x, spec, p, True) * w), p, {"x": x}
    )

    p = ParameterSet()
    init_batchnorm(p, "bn", 3)
    p["bn.gamma"].data[...] = rng.uniform(0.5, 1.5, 3)
    p["bn.beta"].data[...] = rng.normal(size=3)
    x = Tensor(rng.normal(size=(4, 3, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3, 6)))
    cases["batchnorm"] = (lambda p=p, x=x, w=w: T.tsum(batchnorm_forward(x, p, "bn", True) * w), p, {"x": x})

    p = ParameterSet()
    x = Tensor(rng.normal(size=(4, 3, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3, 8)))
    cases["dropout"] = (
        lambda x=x, w=w: T.tsum(dropout_forward(x, 0.2, True, np.random.default_rng(5)) * w), p, {"x": x}
    )

    p = ParameterSet()
    x = Tensor(rng.normal(size=(2, 3, 10)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 3, 5)))
    cases["maxpool"] = (lambda x=x, w=w: T.tsum(maxpool_forward(x, 2) * w), p, {"x": x})

    p = ParameterSet()
    spec = LayerSpec("gru", "gru", in_dim=3, hidden=4, layers=2)
    init_gru(p, spec, rng)
    for n, t in p.trainable():
        if ".b_" in n:
            t.data[...] = rng.normal(scale=0.3, size=t.shape)
    x = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 4)))
    cases["gru"] = (lambda p=p, x=x, w=w, spec=spec: T.tsum(gru_forward(x, spec, p) * w), p, {"x": x})

    p = ParameterSet()
    spec = LayerSpec("multihead_attention", "mha", in_dim=4, out_dim=4, heads=2)
    init_multihead_attention(p, spec, rng)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 3, 4)))
    cases["multihead_attention"] = (
        lambda p=p, x=x, w=w, spec=spec: T.tsum(multihead_attention_forward(x, spec, p) * w), p, {"x": x}
    )
    return cases


def randomize(params: ParameterSet, rng: np.random.Generator) -> None:
    """Move the fusion and head parameters to a generic random point.

    At the default initialization the attention and quality scores are
    nearly constant, which leaves many of their gradient entries below the
    resolution of double-precision central differences; unit-scale weights
    keep every path active.  Encoders keep their initialization so that batch
    norm leaves every channel partly active (a fully active or fully dead
    channel makes the next block's shift gradient exactly zero).
    """
    for name, t in params.trainable():
        if name.startswith(("enc.", "head.fuse", "wgf.score")):
            continue
        scale = 0.5 if name.startswith("wgf.gru") else 1.0  # keep the gates out of saturation
        t.data[...] = rng.normal(scale=scale, size=t.shape)


def objective_case(variant: int, seed: int, cfg: ModelConfig = GRADCHECK_MODEL):
    """Full objective of one ablation variant on a random 2-sample batch.

    The local head's residual target is frozen at its unperturbed value so
    the finite differences see the same function the stop-gradient defines.
    """
    rng = np.random.default_rng([seed, variant])
    ab = AblationConfig.from_variant(variant)
    weights = LossWeights()
    params = init_model(cfg, ab, seed + variant)
    randomize(params, rng)
    x = rng.normal(size=(2, cfg.n_devices, cfg.window, cfg.in_channels))
    y = rng.normal(size=(2, 2))
    state, _ = forward(x, params, cfg, ab, weights, training=True)
    residual = y - state.v_glb.data

    def f():
        s, b = forward(x, params, cfg, ab, weights, training=True)
        return total_loss(s, b, y, weights, ab, residual_target=residual)[0]

    return f, params


def run_suite(
    seed: int = 0,
    corrupt: str | None = None,
    per_tensor: int | None = 5,
    layer_epsilon: float = 1e-6,
    loss_epsilon: float = 1e-6,
) -> list[CheckRow]:
    """One row per layer kind plus one per ablation variant's full objective."""
    rng = np.random.default_rng(seed)
    rows = []
    for name, (f, params, inputs) in _layer_cases(rng).items():
        if corrupt == name:
            f = _corrupted(f, params) if len(params) else _corrupt_inputs(f, inputs)
        start = time.perf_counter()
        err = finite_diff_check(f, params, epsilon=layer_epsilon, inputs=inputs)
        rows.append(CheckRow(name, err, LAYER_THRESHOLD, time.perf_counter() - start))
    for k in sorted(ABLATION_VARIANTS):
        name = f"objective_variant_{k}"
        f, params = objective_case(k, seed)
        if corrupt in (name, "objective"):
            f = _corrupted(f, params)
        start = time.perf_counter()
        err = finite_diff_check(
            f,
            params,
            epsilon=loss_epsilon,
            max_per_tensor=per_tensor,
            rng=np.random.default_rng([seed, k, 1]),
            kink_retries=2,
        )
        rows.append(CheckRow(name, err, LOSS_THRESHOLD, time.perf_counter() - start))
    return rows


def _corrupt_inputs(f: Callable[[], Tensor], inputs: dict[str, Tensor]) -> Callable[[], Tensor]:
    def g():
        out = f()
        for x in inputs.values():
            out = out + T.tsum(x - T.stop_gradient(x)) * 0.1
        return out

    return g
