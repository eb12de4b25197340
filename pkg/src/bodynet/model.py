"""Multi-device velocity network with disentangled global/local features.

Each device j owns two weight-independent six-block conv encoders producing
``H_glb[j]`` and ``H_loc[j]`` of shape ``[batch, C, T']``.  Global features
are fused across devices with sigmoid-rescaled quality weights and a
two-layer GRU; local features are projected with a shared linear map, mixed
across devices by self-attention and averaged.  The two velocity estimates
are combined by a learned 4 -> 2 affine map.

Ablation flags switch off the three modules independently:

``contrast_fe``  off: the two encoders' outputs are concatenated per device
                 ("hybrid" features, 2C channels) and feed both paths; no
                 contrastive or orthogonality loss.
``weighted_gf``  off: devices are averaged (alpha = 1/J) and the pooled mean
                 goes straight to the velocity head (no GRU).
``attentive_la`` off: no local branch; the global velocity is the output.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffnet import tensor as T
from .diffnet.layers import (
    ENCODER_KERNELS,
    LayerSpec,
    adaptive_avg_pool1d,
    conv1d_block_forward,
    gru_forward,
    init_conv1d_block,
    init_gru,
    init_linear,
    init_multihead_attention,
    linear_forward,
    multihead_attention_forward,
)
from .diffnet.params import ParameterSet
from .diffnet.tensor import ShapeError, Tensor

NORM_EPS = 1e-8  # cosine denominators use sqrt(|h|^2 + NORM_EPS^2)


@dataclass
class LossWeights:
    lambda_v: float = 1.0
    lambda_v_glb: float = 0.1
    lambda_v_loc: float = 1.0
    lambda_con: float = 0.2
    lambda_orth: float = 0.05
    tau: float = 0.1
    lambda_a: float = 9.0
    lambda_b: float = 0.01
    lambda_c_w: float = 10.0

    def validate(self) -> None:
        for k, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k} must be finite and >= 0, got {v}")
        for k in ("tau", "lambda_a", "lambda_b", "lambda_c_w"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be > 0")


@dataclass(frozen=True)
class AblationConfig:
    contrast_fe: bool = True
    weighted_gf: bool = True
    attentive_la: bool = True

    @property
    def tag(self) -> str:
        parts = [n for n, on in (("C", self.contrast_fe), ("W", self.weighted_gf), ("A", self.attentive_la)) if on]
        return "+".join(parts) or "base"

    @property
    def variant(self) -> int:
        return ABLATION_VARIANTS_INV[(self.contrast_fe, self.weighted_gf, self.attentive_la)]

    @classmethod
    def from_variant(cls, k: int) -> AblationConfig:
        if k not in ABLATION_VARIANTS:
            raise ValueError(f"ablation variant must be 1..6, got {k}")
        return cls(*ABLATION_VARIANTS[k])


# rows (1)-(6): (contrast_fe, weighted_gf, attentive_la)
ABLATION_VARIANTS = {
    1: (False, False, False),
    2: (False, True, False),
    3: (True, False, True),
    4: (False, True, True),
    5: (True, True, False),
    6: (True, True, True),
}
ABLATION_VARIANTS_INV = {v: k for k, v in ABLATION_VARIANTS.items()}


@dataclass
class ModelConfig:
    n_devices: int = 3
    in_channels: int = 6
    window: int = 100
    channels: tuple[int, ...] = (32, 64, 128, 128, 128, 128)
    kernels: tuple[int, ...] = ENCODER_KERNELS
    pool_blocks: int = 3  # max-pool (width 2) after the first ``pool_blocks`` blocks
    pool_width: int = 2
    dropout: float = 0.2
    segments: int = 4  # retained temporal length T'' fed to the GRU
    gru_hidden: int = 64
    gru_layers: int = 2
    d_loc: int = 128
    heads: int = 4
    h_loc: int = 64

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.kernels = tuple(int(k) for k in self.kernels)
        if tuple(self.kernels) != ENCODER_KERNELS:
            raise ValueError(f"encoder kernels must be {ENCODER_KERNELS}")
        if len(self.channels) != len(self.kernels):
            raise ValueError("one channel width per encoder block required")
        if self.d_loc % self.heads:
            raise ValueError(f"d_loc {self.d_loc} not divisible by {self.heads} heads")
        if self.n_devices < 1:
            raise ValueError("at least one device required")

    def block_specs(self, prefix: str) -> list[LayerSpec]:
        specs = []
        c_in = self.in_channels
        for k, (c, kern) in enumerate(zip(self.channels, self.kernels)):
            pool = self.pool_width if k < self.pool_blocks else 0
            specs.append(LayerSpec("conv1d_block", f"{prefix}.block{k}", c_in, c, kernel=kern, pool=pool, dropout=self.dropout))
            c_in = c
        return specs

    def feature_length(self, window: int | None = None) -> int:
        """Encoder output length T' for an input of ``window`` samples."""
        t = self.window if window is None else window
        for k, kern in enumerate(self.kernels):
            if t < kern:
                raise ShapeError(f"window of {window or self.window} samples is below the encoder's receptive field", dim="time")
            t = t - kern + 1
            if k < self.pool_blocks:
                t //= self.pool_width
        if t < self.segments:
            raise ShapeError(f"encoder output length {t} shorter than {self.segments} segments", dim="time")
        return t

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["kernels"] = list(self.kernels)
        return d


@dataclass
class FeatureBundle:
    glb: list[Tensor]
    loc: list[Tensor]

    def __post_init__(self):
        if len(self.glb) != len(self.loc) or not self.glb:
            raise ShapeError("bundle needs the same positive number of global and local features", dim="J")
        shape = self.glb[0].shape
        for h in self.glb + self.loc:
            if h.shape != shape:
                raise ShapeError(f"feature shapes differ: {h.shape} vs {shape}", dim="feature")

    @property
    def n_devices(self) -> int:
        return len(self.glb)

    def hybrid(self) -> list[Tensor]:
        return [T.concat([g, l], axis=1) for g, l in zip(self.glb, self.loc)]


@dataclass
class FusionState:
    u_glb: list[Tensor] = field(default_factory=list)
    e: Tensor | None = None  # [batch, J]
    alpha_tilde: Tensor | None = None
    alpha: Tensor | None = None
    G: Tensor | None = None
    r_glb: Tensor | None = None
    D: Tensor | None = None
    D_prime: Tensor | None = None
    r_loc: Tensor | None = None
    v_glb: Tensor | None = None
    v_loc: Tensor | None = None
    v: Tensor | None = None


# -- construction ----------------------------------------------------------------

def path_widths(cfg: ModelConfig, ablation: AblationConfig) -> int:
    """Channel width seen by the fusion paths (doubled for hybrid features)."""
    return cfg.channels[-1] * (1 if ablation.contrast_fe else 2)


def init_model(cfg: ModelConfig, ablation: AblationConfig, seed: int) -> ParameterSet:
    """Create all parameters in a fixed order from a seeded generator."""
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    for branch in ("glb", "loc"):
        for j in range(cfg.n_devices):
            for spec in cfg.block_specs(f"enc.{branch}.{j}"):
                init_conv1d_block(params, spec, rng)
    c = path_widths(cfg, ablation)
    t_len = cfg.feature_length()
    if ablation.weighted_gf:
        init_linear(params, "wgf.score", c * cfg.segments, 1, rng)
        init_gru(params, gru_spec(cfg, c), rng)
        init_linear(params, "head.glb", cfg.gru_hidden, 2, rng)
    else:
        init_linear(params, "head.glb", c * cfg.segments, 2, rng)
    if ablation.attentive_la:
        init_linear(params, "ala.proj", c * t_len, cfg.d_loc, rng)
        init_multihead_attention(params, attention_spec(cfg), rng)
        init_linear(params, "ala.fc", cfg.d_loc, cfg.h_loc, rng)
        init_linear(params, "head.loc", cfg.h_loc, 2, rng)
        params.add("head.fuse.w", np.hstack([np.eye(2), np.eye(2)]))
        params.add("head.fuse.b", np.zeros(2))
    return params


def gru_spec(cfg: ModelConfig, width: int) -> LayerSpec:
    return LayerSpec("gru", "wgf.gru", in_dim=width, hidden=cfg.gru_hidden, layers=cfg.gru_layers)


def attention_spec(cfg: ModelConfig) -> LayerSpec:
    return LayerSpec("multihead_attention", "ala.mha", in_dim=cfg.d_loc, out_dim=cfg.d_loc, heads=cfg.heads)


# -- encoders --------------------------------------------------------------------

def encode(
    x,
    params: ParameterSet,
    cfg: ModelConfig,
    training: bool,
    rng: np.random.Generator | None = None,
) -> FeatureBundle:
    """Run both encoders of every device over ``x`` of shape ``[batch, J, L, 6]``."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != cfg.n_devices or x.shape[3] != cfg.in_channels:
        raise ShapeError(
            f"expected input [batch, {cfg.n_devices}, L, {cfg.in_channels}], got {x.shape}", dim="input"
        )
    cfg.feature_length(x.shape[2])
    feats = {"glb": [], "loc": []}
    for j in range(cfg.n_devices):
        xj = Tensor(np.ascontiguousarray(x[:, j].transpose(0, 2, 1)))
        for branch in ("glb", "loc"):
            h = xj
            for spec in cfg.block_specs(f"enc.{branch}.{j}"):
                h = conv1d_block_forward(h, spec, params, training, rng)
            feats[branch].append(h)
    return FeatureBundle(feats["glb"], feats["loc"])


# -- losses on features ----------------------------------------------------------

def _unit_rows(features: list[Tensor]) -> Tensor:
    """Stack per-device features flattened over (C, T') and normalized: ``[batch, J, n]``.

    A window whose post-ReLU features are all zero gets a zero row (cosine 0)
    instead of a division by zero; the floor is far below any live norm.
    """
    B = features[0].shape[0]
    flat = T.stack([T.reshape(h, (B, -1)) for h in features], axis=1)
    norm = T.sqrt(T.tsum(flat * flat, axis=-1, keepdims=True) + NORM_EPS**2)
    return flat / norm


def _cosines(a: list[Tensor], b: list[Tensor]) -> Tensor:
    """Cosine similarity of every device pair: ``[batch, J, J]`` with entry (i, j) = cos(a_i, b_j)."""
    ua, ub = _unit_rows(a), _unit_rows(b)
    return T.matmul(ua, T.transpose(ub, (0, 2, 1)))


def contrastive_loss(bundle: FeatureBundle, tau: float) -> Tensor:
    """InfoNCE over ordered global pairs with global/local and local/local negatives."""
    J = bundle.n_devices
    if J < 2:
        raise ValueError("contrastive loss needs at least two devices")
    gg = T.exp(_cosines(bundle.glb, bundle.glb) * (1.0 / tau))
    gl = T.exp(_cosines(bundle.glb, bundle.loc) * (1.0 / tau))
    ll = T.exp(_cosines(bundle.loc, bundle.loc) * (1.0 / tau))
    eye = np.eye(J)
    off = 1.0 - eye
    neg = T.tsum(gl * eye, axis=(1, 2)) + T.tsum(ll * off, axis=(1, 2))  # [batch]
    neg = T.reshape(neg, (-1, 1, 1))
    terms = T.log(gg / (gg + neg)) * off
    return T.tmean(T.tsum(terms, axis=(1, 2)) * -1.0)


def orthogonality_loss(bundle: FeatureBundle) -> Tensor:
    """Cosines between local features of distinct devices plus global/local of each device."""
    J = bundle.n_devices
    ll = _cosines(bundle.loc, bundle.loc)
    gl = _cosines(bundle.glb, bundle.loc)
    eye = np.eye(J)
    per_sample = T.tsum(ll * (1.0 - eye), axis=(1, 2)) + T.tsum(gl * eye, axis=(1, 2))
    return T.tmean(per_sample)


# -- fusion paths ----------------------------------------------------------------

def quality_weights(e: Tensor, weights: LossWeights) -> tuple[Tensor, Tensor]:
    """Rescaled and normalized quality weights from raw scores ``e`` ``[batch, J]``."""
    alpha_tilde = T.sigmoid(e * (1.0 / weights.lambda_b)) * weights.lambda_a + weights.lambda_c_w
    alpha = alpha_tilde / T.tsum(alpha_tilde, axis=1, keepdims=True)
    return alpha_tilde, alpha


def weighted_global_fusion(
    features: list[Tensor],
    weights: LossWeights,
    params: ParameterSet,
    cfg: ModelConfig,
    weighted: bool = True,
    state: FusionState | None = None,
) -> FusionState:
    """Pool each device over time, weight, sum, and regress the global velocity.

    ``features`` are the per-device global (or hybrid) maps ``[batch, C, T']``.
    With ``weighted=False`` the devices are averaged and the pooled mean is
    fed straight to the head.
    """
    state = state or FusionState()
    B = features[0].shape[0]
    J = len(features)
    u = [adaptive_avg_pool1d(h, cfg.segments) for h in features]  # [B, C, T'']
    state.u_glb = u
    if weighted:
        flat = T.stack([T.reshape(uj, (B, -1)) for uj in u], axis=1)  # [B, J, C*T'']
        length = flat.shape[-1]
        e = T.reshape(linear_forward(flat, params, "wgf.score"), (B, J)) * (1.0 / length)
        state.e = e
        state.alpha_tilde, state.alpha = quality_weights(e, weights)
        G = None
        for j in range(J):
            term = u[j] * T.reshape(state.alpha[:, j], (B, 1, 1))
            G = term if G is None else G + term
        state.G = G
        state.r_glb = gru_forward(T.transpose(G, (0, 2, 1)), gru_spec(cfg, G.shape[1]), params)
        state.v_glb = linear_forward(state.r_glb, params, "head.glb")
    else:
        state.alpha = Tensor(np.full((B, J), 1.0 / J))
        G = u[0]
        for uj in u[1:]:
            G = G + uj
        state.G = G * (1.0 / J)
        state.v_glb = linear_forward(T.reshape(state.G, (B, -1)), params, "head.glb")
    return state


def attentive_local_analysis(
    features: list[Tensor], params: ParameterSet, cfg: ModelConfig, state: FusionState | None = None
) -> FusionState:
    """Shared projection per device, self-attention across devices, mean, and the local head."""
    state = state or FusionState()
    B = features[0].shape[0]
    d = [linear_forward(T.reshape(h, (B, -1)), params, "ala.proj") for h in features]
    length = features[0].size // B
    state.D = T.stack(d, axis=1) * (1.0 / length)  # [B, J, d_loc]
    state.D_prime = multihead_attention_forward(state.D, attention_spec(cfg), params)
    pooled = T.tmean(state.D_prime, axis=1)
    state.r_loc = T.relu(linear_forward(pooled, params, "ala.fc"))
    state.v_loc = linear_forward(state.r_loc, params, "head.loc")
    return state


def fuse_velocity(v_glb: Tensor, v_loc: Tensor, params: ParameterSet) -> Tensor:
    if v_glb.shape != v_loc.shape:
        raise ShapeError(f"velocity shapes differ: {v_glb.shape} vs {v_loc.shape}", dim="velocity")
    return linear_forward(T.concat([v_glb, v_loc], axis=-1), params, "head.fuse")


def forward(
    x,
    params: ParameterSet,
    cfg: ModelConfig,
    ablation: AblationConfig,
    weights: LossWeights,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[FusionState, FeatureBundle]:
    bundle = encode(x, params, cfg, training, rng)
    if ablation.contrast_fe:
        f_glb, f_loc = bundle.glb, bundle.loc
    else:
        f_glb = f_loc = bundle.hybrid()
    state = weighted_global_fusion(f_glb, weights, params, cfg, weighted=ablation.weighted_gf)
    if ablation.attentive_la:
        attentive_local_analysis(f_loc, params, cfg, state)
        state.v = fuse_velocity(state.v_glb, state.v_loc, params)
    else:
        state.v = state.v_glb
    return state, bundle


# -- objective -------------------------------------------------------------------

def mse(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}", dim="velocity")
    diff = pred - target
    return T.tmean(diff * diff)


def total_loss(
    state: FusionState,
    bundle: FeatureBundle,
    v_true,
    weights: LossWeights,
    ablation: AblationConfig,
    residual_target=None,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted composite objective; returns the scalar and its named components.

    The local head regresses the residual ``v_true - v_glb`` with ``v_glb``
    held constant, so that target sends no gradient into the global path.
    ``residual_target`` replaces that residual with a fixed array; finite
    difference checks use it to hold the target at its unperturbed value,
    which is the function the analytic gradient actually differentiates.
    """
    y = v_true if isinstance(v_true, Tensor) else Tensor(np.asarray(v_true, dtype=np.float64))
    parts: dict[str, Tensor] = {"vel": mse(state.v, y)}
    loss = parts["vel"] * weights.lambda_v
    if ablation.attentive_la:
        parts["vel_glb"] = mse(state.v_glb, y)
        target = y - T.stop_gradient(state.v_glb) if residual_target is None else residual_target
        parts["vel_loc"] = mse(state.v_loc, target)
        loss = loss + parts["vel_glb"] * weights.lambda_v_glb + parts["vel_loc"] * weights.lambda_v_loc
    if ablation.contrast_fe:
        parts["con"] = contrastive_loss(bundle, weights.tau)
        parts["orth"] = orthogonality_loss(bundle)
        loss = loss + parts["con"] * weights.lambda_con + parts["orth"] * weights.lambda_orth
    components = {k: float(v.data) for k, v in parts.items()}
    components["total"] = float(loss.data)
    return loss, components


def predict(x, params: ParameterSet, cfg: ModelConfig, ablation: AblationConfig, weights: LossWeights, batch: int = 256) -> np.ndarray:
    """Inference-mode velocities ``[N, 2]`` for windows ``x`` ``[N, J, L, 6]``."""
    out = []
    for i in range(0, len(x), batch):
        state, _ = forward(x[i : i + batch], params, cfg, ablation, weights, training=False)
        out.append(state.v.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, 2))
