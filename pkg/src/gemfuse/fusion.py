"""Fusion mechanisms for two aligned token grids, with exact manual backprop.

Mechanisms:
  * token exchange: hard per-token replacement gated by predictor scores
  * full cross-attention: queries from one modality, keys/values from the
    other, over all N tokens
  * pixel-wise cross-attention: attention restricted to co-located tokens
  * geminifusion: pixel-wise two-entry attention combining a noised
    intra-modality entry and a relation-modulated inter-modality entry

Every forward pass that feeds training returns a cache holding the
intermediates needed to run the exact analytic backward pass.

Efficiency note: geminifusion computes one Q/K/V projection per modality and
derives both key/value entries from them (noise and relation modulation are
applied post-projection, which is algebraically identical to pre-projection
application). The per-layer noise-vector projections cost a constant 2*d*d
MACs and are excluded from MAC accounting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ConfigError,
    DimensionError,
    DomainError,
    NumericError,
    Rng,
    as_f64,
    matmul,
    pair_logits,
    pair_mix,
    relu,
    rowwise_dot,
    sigmoid,
    softmax_lastdim,
)

RELATION_VARIANTS = ("mlp2_softmax", "mlp2_sigmoid", "conv1x1_softmax")


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class RelationParams:
    """Relation discriminator: concatenated token pair -> scalar in (0, 1).

    mlp2 variants: affine (2d -> hidden), relu, affine (hidden -> 2).
    conv1x1 variant: a single affine map (2d -> 2); at per-pixel granularity
    a 1x1 convolution is exactly this.
    """

    variant: str
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray | None = None
    b2: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.variant not in RELATION_VARIANTS:
            raise ConfigError(f"unknown relation discriminator variant: {self.variant!r}")

    @property
    def hidden(self) -> int:
        return self.w1.shape[1] if self.variant != "conv1x1_softmax" else 0

    def named(self, prefix: str = "relation") -> dict[str, np.ndarray]:
        out = {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1}
        if self.w2 is not None:
            out[f"{prefix}.w2"] = self.w2
            out[f"{prefix}.b2"] = self.b2
        return out


@dataclass
class FusionParams:
    """Per-layer fusion parameters shared by both modality directions."""

    dim: int
    heads: int
    w_query: np.ndarray
    w_key: np.ndarray
    w_value: np.ndarray
    relation: RelationParams
    noise_key: np.ndarray
    noise_value: np.ndarray

    def __post_init__(self) -> None:
        if self.dim <= 0 or self.heads <= 0 or self.dim % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide dim ({self.dim})")
        for name in ("w_query", "w_key", "w_value"):
            w = getattr(self, name)
            if w.shape != (self.dim, self.dim):
                raise DimensionError(f"{name} must be [{self.dim}x{self.dim}], got {w.shape}")
        for arr in (self.w_query, self.w_key, self.w_value, self.noise_key, self.noise_value):
            if not np.all(np.isfinite(arr)):
                raise DomainError("fusion parameters must be finite")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def named(self, prefix: str = "fusion") -> dict[str, np.ndarray]:
        out = {
            f"{prefix}.w_query": self.w_query,
            f"{prefix}.w_key": self.w_key,
            f"{prefix}.w_value": self.w_value,
            f"{prefix}.noise_key": self.noise_key,
            f"{prefix}.noise_value": self.noise_value,
        }
        out.update(self.relation.named(f"{prefix}.relation"))
        return out


@dataclass
class ExchangeConfig:
    """Threshold and score-predictor parameters for the exchange baseline."""

    theta: float
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self) -> None:
        if not 0.0 <= self.theta <= 1.0:
            raise DomainError(f"theta must lie in [0, 1], got {self.theta}")

    def named(self, prefix: str = "exchange") -> dict[str, np.ndarray]:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }


@dataclass
class GeminiOptions:
    """Ablation switches: layer noise, relation discriminator, self entry."""

    noise: bool = True
    relation: bool = True
    self_entry: bool = True


DEFAULT_OPTIONS = GeminiOptions()


# ---------------------------------------------------------------------------
# initialisation


def init_relation_params(rng: Rng, dim: int, variant: str = "mlp2_softmax",
                         hidden: int | None = None, scale: float | None = None) -> RelationParams:
    if variant not in RELATION_VARIANTS:
        raise ConfigError(f"unknown relation discriminator variant: {variant!r}")
    if variant == "conv1x1_softmax":
        s = scale if scale is not None else 1.0 / np.sqrt(2 * dim)
        return RelationParams(variant, rng.normal((2 * dim, 2), 0.0, s), np.zeros(2))
    h = hidden if hidden is not None else dim
    s1 = scale if scale is not None else 1.0 / np.sqrt(2 * dim)
    s2 = scale if scale is not None else 1.0 / np.sqrt(h)
    return RelationParams(variant, rng.normal((2 * dim, h), 0.0, s1), np.zeros(h),
                          rng.normal((h, 2), 0.0, s2), np.zeros(2))


def init_fusion_params(rng: Rng, dim: int, heads: int, relation_variant: str = "mlp2_softmax",
                       weight_scale: float | None = None, noise_scale: float = 0.02) -> FusionParams:
    s = weight_scale if weight_scale is not None else 1.0 / np.sqrt(dim)
    return FusionParams(
        dim=dim,
        heads=heads,
        w_query=rng.normal((dim, dim), 0.0, s),
        w_key=rng.normal((dim, dim), 0.0, s),
        w_value=rng.normal((dim, dim), 0.0, s),
        relation=init_relation_params(rng, dim, relation_variant),
        noise_key=rng.normal((dim,), 0.0, noise_scale),
        noise_value=rng.normal((dim,), 0.0, noise_scale),
    )


def init_exchange_config(rng: Rng, dim: int, theta: float = 0.02,
                         scale: float | None = None) -> ExchangeConfig:
    s = scale if scale is not None else 1.0 / np.sqrt(dim)
    return ExchangeConfig(theta, rng.normal((dim, dim), 0.0, s), np.zeros(dim),
                          rng.normal((dim, 1), 0.0, s), np.zeros(1))


# ---------------------------------------------------------------------------
# relation discriminator


@dataclass
class RelationCache:
    params: RelationParams
    inputs: np.ndarray      # [N, 2d] concatenation
    pre: np.ndarray | None  # mlp hidden pre-activation
    act: np.ndarray | None
    logits: np.ndarray      # [N, 2]
    probs: np.ndarray | None
    score: np.ndarray       # [N]


@dataclass
class RelationGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray | None = None
    b2: np.ndarray | None = None

    def named(self, prefix: str = "relation") -> dict[str, np.ndarray]:
        out = {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1}
        if self.w2 is not None:
            out[f"{prefix}.w2"] = self.w2
            out[f"{prefix}.b2"] = self.b2
        return out


def _relation_forward(x1: np.ndarray, x2: np.ndarray, params: RelationParams) -> RelationCache:
    if x1.shape != x2.shape:
        raise DimensionError(f"relation inputs disagree: {x1.shape} vs {x2.shape}")
    z = np.concatenate([x1, x2], axis=1)
    if params.variant == "conv1x1_softmax":
        logits = matmul(z, params.w1) + params.b1
        probs = softmax_lastdim(logits)
        return RelationCache(params, z, None, None, logits, probs, probs[:, 0].copy())
    pre = matmul(z, params.w1) + params.b1
    act = relu(pre)
    logits = matmul(act, params.w2) + params.b2
    if params.variant == "mlp2_softmax":
        probs = softmax_lastdim(logits)
        score = probs[:, 0].copy()
    else:  # mlp2_sigmoid: first logit squashed, second logit unused
        probs = None
        score = sigmoid(logits[:, 0])
    return RelationCache(params, z, pre, act, logits, probs, score)


def relation_score(x1: np.ndarray, x2: np.ndarray, params: RelationParams) -> np.ndarray:
    """Per-token relation score phi(x1[i], x2[i]) in (0, 1)."""
    return _relation_forward(as_f64(x1), as_f64(x2), params).score


def _relation_backward(cache: RelationCache, dscore: np.ndarray):
    p = cache.params
    n = cache.inputs.shape[0]
    dlogits = np.zeros((n, 2))
    if p.variant in ("mlp2_softmax", "conv1x1_softmax"):
        p0 = cache.probs[:, 0]
        p1 = cache.probs[:, 1]
        dlogits[:, 0] = dscore * p0 * (1.0 - p0)
        dlogits[:, 1] = -dscore * p0 * p1
    else:
        s = cache.score
        dlogits[:, 0] = dscore * s * (1.0 - s)
    if p.variant == "conv1x1_softmax":
        dz = dlogits @ p.w1.T
        grads = RelationGrads(cache.inputs.T @ dlogits, dlogits.sum(axis=0))
    else:
        dact = dlogits @ p.w2.T
        dw2 = cache.act.T @ dlogits
        db2 = dlogits.sum(axis=0)
        dpre = dact * (cache.pre > 0)
        dz = dpre @ p.w1.T
        grads = RelationGrads(cache.inputs.T @ dpre, dpre.sum(axis=0), dw2, db2)
    d = cache.inputs.shape[1] // 2
    return dz[:, :d], dz[:, d:], grads


# ---------------------------------------------------------------------------
# score predictor and token exchange


@dataclass
class ScoreCache:
    cfg: ExchangeConfig
    inputs: np.ndarray
    pre: np.ndarray
    act: np.ndarray
    scores: np.ndarray


@dataclass
class ExchangeGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def named(self, prefix: str = "exchange") -> dict[str, np.ndarray]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


def _score_forward(x: np.ndarray, cfg: ExchangeConfig) -> ScoreCache:
    if x.ndim != 2 or x.shape[1] != cfg.w1.shape[0]:
        raise DimensionError(f"score predictor expects [N x {cfg.w1.shape[0]}], got {x.shape}")
    pre = matmul(x, cfg.w1) + cfg.b1
    act = relu(pre)
    logit = matmul(act, cfg.w2)[:, 0] + cfg.b2[0]
    return ScoreCache(cfg, x, pre, act, sigmoid(logit))


def score_predict(x: np.ndarray, cfg: ExchangeConfig) -> np.ndarray:
    """Per-token importance score in (0, 1)."""
    return _score_forward(as_f64(x), cfg).scores


def score_predict_backward(cache: ScoreCache, dscores: np.ndarray):
    s = cache.scores
    dlogit = dscores * s * (1.0 - s)
    dact = np.outer(dlogit, cache.cfg.w2[:, 0])
    dw2 = (cache.act.T @ dlogit)[:, None]
    db2 = np.array([dlogit.sum()])
    dpre = dact * (cache.pre > 0)
    dx = dpre @ cache.cfg.w1.T
    return dx, ExchangeGrads(cache.inputs.T @ dpre, dpre.sum(axis=0), dw2, db2)


@dataclass
class ExchangeMasks:
    """Per-token keep indicators for both modalities (True = token kept)."""

    keep1: np.ndarray
    keep2: np.ndarray

    def rates(self) -> tuple[float, float]:
        """Fraction of tokens exchanged per modality."""
        return float(1.0 - self.keep1.mean()), float(1.0 - self.keep2.mean())


def token_exchange(x1: np.ndarray, x2: np.ndarray, s1: np.ndarray, s2: np.ndarray,
                   theta: float) -> tuple[np.ndarray, np.ndarray, ExchangeMasks]:
    """Hard token exchange: y1[i] = x1[i] if s1[i] >= theta else x2[i], and
    symmetrically for y2. Selection is copy-only; no MACs."""
    x1, x2 = as_f64(x1), as_f64(x2)
    s1, s2 = np.asarray(s1, dtype=np.float64), np.asarray(s2, dtype=np.float64)
    if not 0.0 <= theta <= 1.0:
        raise DomainError(f"theta must lie in [0, 1], got {theta}")
    if x1.shape != x2.shape or s1.shape != (x1.shape[0],) or s2.shape != (x2.shape[0],):
        raise DimensionError("token_exchange shape mismatch")
    keep1 = s1 >= theta
    keep2 = s2 >= theta
    y1 = np.where(keep1[:, None], x1, x2)
    y2 = np.where(keep2[:, None], x2, x1)
    return y1, y2, ExchangeMasks(keep1, keep2)


def token_exchange_backward(masks: ExchangeMasks, dy1: np.ndarray, dy2: np.ndarray):
    """Route upstream gradients to whichever source token was selected.

    Straight-through on the hard indicator: no gradient flows to the scores.
    """
    k1 = masks.keep1[:, None]
    k2 = masks.keep2[:, None]
    dx1 = np.where(k1, dy1, 0.0) + np.where(k2, 0.0, dy2)
    dx2 = np.where(k2, dy2, 0.0) + np.where(k1, 0.0, dy1)
    return dx1, dx2


# ---------------------------------------------------------------------------
# full cross-attention


@dataclass
class AttentionDirection:
    """Intermediates for one direction (queries from `x_q`)."""

    x_q: np.ndarray
    proj_q: np.ndarray
    proj_k: np.ndarray
    proj_v: np.ndarray
    attn: list[np.ndarray] = field(default_factory=list)  # per head [N, N]


@dataclass
class CrossAttentionCache:
    params: FusionParams
    dir1: AttentionDirection
    dir2: AttentionDirection


@dataclass
class FusionGrads:
    """Gradients of the shared fusion parameters (both directions summed)."""

    w_query: np.ndarray
    w_key: np.ndarray
    w_value: np.ndarray
    noise_key: np.ndarray
    noise_value: np.ndarray
    relation: RelationGrads | None = None

    def named(self, prefix: str = "fusion") -> dict[str, np.ndarray]:
        out = {
            f"{prefix}.w_query": self.w_query,
            f"{prefix}.w_key": self.w_key,
            f"{prefix}.w_value": self.w_value,
            f"{prefix}.noise_key": self.noise_key,
            f"{prefix}.noise_value": self.noise_value,
        }
        if self.relation is not None:
            out.update(self.relation.named(f"{prefix}.relation"))
        return out


def _zero_fusion_grads(p: FusionParams, with_relation: bool) -> FusionGrads:
    rel = None
    if with_relation:
        r = p.relation
        rel = RelationGrads(np.zeros_like(r.w1), np.zeros_like(r.b1),
                            None if r.w2 is None else np.zeros_like(r.w2),
                            None if r.b2 is None else np.zeros_like(r.b2))
    return FusionGrads(np.zeros_like(p.w_query), np.zeros_like(p.w_key),
                       np.zeros_like(p.w_value), np.zeros_like(p.noise_key),
                       np.zeros_like(p.noise_value), rel)


def _check_pair(x1: np.ndarray, x2: np.ndarray, p: FusionParams) -> None:
    if x1.shape != x2.shape or x1.ndim != 2 or x1.shape[1] != p.dim:
        raise DimensionError(
            f"expected two [N x {p.dim}] inputs, got {x1.shape} and {x2.shape}")


def _attend_full(direction: AttentionDirection, heads: int) -> np.ndarray:
    """softmax(Q_h K_h^T / sqrt(d_h)) V_h per head, heads concatenated."""
    n, d = direction.proj_q.shape
    dh = d // heads
    alpha = 1.0 / np.sqrt(dh)
    out = np.empty_like(direction.proj_q)
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        logits = matmul(direction.proj_q[:, s], direction.proj_k[:, s].T) * alpha
        if not np.all(np.isfinite(logits)):
            raise NumericError("cross_attention: non-finite attention logits")
        attn = softmax_lastdim(logits)
        direction.attn.append(attn)
        out[:, s] = matmul(attn, direction.proj_v[:, s])
    return out


def cross_attention(x1: np.ndarray, x2: np.ndarray, p: FusionParams):
    """Full bidirectional cross-attention with residuals (both directions
    share the projection weights)."""
    x1, x2 = as_f64(x1), as_f64(x2)
    _check_pair(x1, x2, p)
    if x1.shape[0] < 1:
        raise DimensionError("cross_attention requires at least one token")
    d1 = AttentionDirection(x1, matmul(x1, p.w_query), matmul(x2, p.w_key), matmul(x2, p.w_value))
    d2 = AttentionDirection(x2, matmul(x2, p.w_query), matmul(x1, p.w_key), matmul(x1, p.w_value))
    y1 = _attend_full(d1, p.heads) + x1
    y2 = _attend_full(d2, p.heads) + x2
    return y1, y2, CrossAttentionCache(p, d1, d2)


def _attend_full_backward(direction: AttentionDirection, heads: int, dy: np.ndarray):
    n, d = direction.proj_q.shape
    dh = d // heads
    alpha = 1.0 / np.sqrt(dh)
    dq = np.zeros_like(direction.proj_q)
    dk = np.zeros_like(direction.proj_k)
    dv = np.zeros_like(direction.proj_v)
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        attn = direction.attn[h]
        dout = dy[:, s]
        dattn = dout @ direction.proj_v[:, s].T
        dv[:, s] = attn.T @ dout
        # softmax backward per row
        dlogits = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
        dq[:, s] = (dlogits @ direction.proj_k[:, s]) * alpha
        dk[:, s] = (dlogits.T @ direction.proj_q[:, s]) * alpha
    return dq, dk, dv


# ---------------------------------------------------------------------------
# pixel-wise cross-attention


@dataclass
class PixelwiseDirection:
    x_q: np.ndarray
    proj_q: np.ndarray
    proj_k: np.ndarray
    proj_v: np.ndarray
    weights: np.ndarray  # [N, heads, 1]


@dataclass
class PixelwiseCache:
    params: FusionParams
    dir1: PixelwiseDirection
    dir2: PixelwiseDirection


def _attend_pixelwise(direction: PixelwiseDirection, heads: int) -> np.ndarray:
    n, d = direction.proj_q.shape
    dh = d // heads
    alpha = 1.0 / np.sqrt(dh)
    out = np.empty_like(direction.proj_q)
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        keys = direction.proj_k[:, None, s]
        logits = pair_logits(direction.proj_q[:, s], keys) * alpha
        w = softmax_lastdim(logits)  # single entry: exactly 1.0
        direction.weights[:, h, :] = w
        out[:, s] = pair_mix(w, direction.proj_v[:, None, s])
    return out


def pixelwise_cross_attention(x1: np.ndarray, x2: np.ndarray, p: FusionParams):
    """Per-token cross-attention: token i attends only to its co-located
    partner. With a single key entry the softmax weight is exactly one, so
    y1[i] = x2[i] W_v + x1[i] holds in closed form."""
    x1, x2 = as_f64(x1), as_f64(x2)
    _check_pair(x1, x2, p)
    n = x1.shape[0]
    d1 = PixelwiseDirection(x1, matmul(x1, p.w_query), matmul(x2, p.w_key),
                            matmul(x2, p.w_value), np.empty((n, p.heads, 1)))
    d2 = PixelwiseDirection(x2, matmul(x2, p.w_query), matmul(x1, p.w_key),
                            matmul(x1, p.w_value), np.empty((n, p.heads, 1)))
    y1 = _attend_pixelwise(d1, p.heads) + x1
    y2 = _attend_pixelwise(d2, p.heads) + x2
    return y1, y2, PixelwiseCache(p, d1, d2)


# ---------------------------------------------------------------------------
# geminifusion


@dataclass
class GeminiDirection:
    """One direction of the fused pair; `x_q` is the query-side modality."""

    x_q: np.ndarray
    proj_q: np.ndarray
    proj_k: np.ndarray       # query-side key projection (both entries derive from it)
    proj_v_self: np.ndarray
    proj_v_cross: np.ndarray
    phi: RelationCache | None
    keys: np.ndarray         # [N, entries, d]
    values: np.ndarray       # [N, entries, d]
    weights: np.ndarray      # [N, heads, entries]


@dataclass
class GeminiCache:
    params: FusionParams
    opts: GeminiOptions
    noise_key_proj: np.ndarray | None
    noise_value_proj: np.ndarray | None
    dir1: GeminiDirection
    dir2: GeminiDirection


def _stage_finite(stage: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"geminifusion: non-finite values in {stage}")


def _gemini_direction(x_q, proj_q, proj_k, proj_v_self, proj_v_cross, phi,
                      nk_proj, nv_proj, opts: GeminiOptions, heads: int):
    n, d = proj_q.shape
    dh = d // heads
    alpha = 1.0 / np.sqrt(dh)
    key_cross = proj_k if (phi is None) else phi.score[:, None] * proj_k
    if opts.self_entry:
        key_self = proj_k + nk_proj if nk_proj is not None else proj_k
        val_self = proj_v_self + nv_proj if nv_proj is not None else proj_v_self
        keys = np.stack([key_self, key_cross], axis=1)
        values = np.stack([val_self, proj_v_cross], axis=1)
    else:
        keys = key_cross[:, None, :]
        values = proj_v_cross[:, None, :]
    entries = keys.shape[1]
    _stage_finite("key/value assembly", keys, values)
    weights = np.empty((n, heads, entries))
    out = np.empty_like(proj_q)
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        logits = pair_logits(proj_q[:, s], keys[:, :, s]) * alpha
        _stage_finite("attention logits", logits)
        w = softmax_lastdim(logits)
        weights[:, h, :] = w
        out[:, s] = pair_mix(w, values[:, :, s])
    y = out + x_q
    _stage_finite("output", y)
    direction = GeminiDirection(x_q, proj_q, proj_k, proj_v_self, proj_v_cross,
                                phi, keys, values, weights)
    return y, direction


def geminifusion_forward(x1: np.ndarray, x2: np.ndarray, p: FusionParams,
                         opts: GeminiOptions = DEFAULT_OPTIONS):
    """Bidirectional pixel-wise fusion with intra- and inter-modality entries.

    Per token i and head, direction 1 attends over two entries:
      K = [(noise_k + x1[i]) W_k,  x1[i] phi(x1[i], x2[i]) W_k]
      V = [(noise_v + x1[i]) W_v,  x2[i] W_v]
    with query x1[i] W_q, plus the residual x1[i]; direction 2 swaps the
    modalities (same weights, same noise, phi arguments swapped).
    """
    x1, x2 = as_f64(x1), as_f64(x2)
    _check_pair(x1, x2, p)
    phi1 = _relation_forward(x1, x2, p.relation) if opts.relation else None
    phi2 = _relation_forward(x2, x1, p.relation) if opts.relation else None
    if opts.relation:
        _stage_finite("relation score", phi1.score, phi2.score)
    pq1, pk1, pv1 = matmul(x1, p.w_query), matmul(x1, p.w_key), matmul(x1, p.w_value)
    pq2, pk2, pv2 = matmul(x2, p.w_query), matmul(x2, p.w_key), matmul(x2, p.w_value)
    _stage_finite("projections", pq1, pk1, pv1, pq2, pk2, pv2)
    use_noise = opts.noise and opts.self_entry
    # Constant per-layer setup (2*d*d MACs), excluded from MAC accounting.
    nk_proj = p.noise_key @ p.w_key if use_noise else None
    nv_proj = p.noise_value @ p.w_value if use_noise else None
    y1, d1 = _gemini_direction(x1, pq1, pk1, pv1, pv2, phi1, nk_proj, nv_proj, opts, p.heads)
    y2, d2 = _gemini_direction(x2, pq2, pk2, pv2, pv1, phi2, nk_proj, nv_proj, opts, p.heads)
    return y1, y2, GeminiCache(p, opts, nk_proj, nv_proj, d1, d2)


def _gemini_direction_backward(direction: GeminiDirection, opts: GeminiOptions,
                               heads: int, dy: np.ndarray):
    n, d = direction.proj_q.shape
    dh = d // heads
    alpha = 1.0 / np.sqrt(dh)
    entries = direction.keys.shape[1]
    dq = np.zeros_like(direction.proj_q)
    dkeys = np.zeros_like(direction.keys)
    dvalues = np.zeros_like(direction.values)
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        w = direction.weights[:, h, :]
        dout = dy[:, s]
        dw = np.einsum("nk,nek->ne", dout, direction.values[:, :, s])
        dvalues[:, :, s] += w[:, :, None] * dout[:, None, :]
        dlogits = w * (dw - np.sum(dw * w, axis=-1, keepdims=True))
        dq[:, s] = alpha * np.einsum("ne,nek->nk", dlogits, direction.keys[:, :, s])
        dkeys[:, :, s] += alpha * dlogits[:, :, None] * direction.proj_q[:, None, :]

    dphi_score = None
    dnk = dnv = None
    if opts.self_entry:
        dk_self, dk_cross = dkeys[:, 0, :], dkeys[:, 1, :]
        dv_self, dv_cross = dvalues[:, 0, :], dvalues[:, 1, :]
    else:
        dk_self = dv_self = None
        dk_cross, dv_cross = dkeys[:, 0, :], dvalues[:, 0, :]

    if direction.phi is not None:
        dproj_k = direction.phi.score[:, None] * dk_cross
        dphi_score = np.einsum("nk,nk->n", dk_cross, direction.proj_k)
    else:
        dproj_k = dk_cross.copy()
    dproj_v_self = np.zeros_like(direction.proj_v_self)
    if opts.self_entry:
        dproj_k += dk_self
        dproj_v_self += dv_self
        if opts.noise:
            dnk = dk_self.sum(axis=0)
            dnv = dv_self.sum(axis=0)
    dproj_v_cross = dv_cross
    # residual path
    dx_q = dy.copy()
    return dq, dproj_k, dproj_v_self, dproj_v_cross, dx_q, dphi_score, dnk, dnv


def fusion_backward(cache, dy1: np.ndarray, dy2: np.ndarray):
    """Exact gradients of a cached fusion forward pass.

    Dispatches on the cache type produced by cross_attention,
    pixelwise_cross_attention or geminifusion_forward. Returns
    (dx1, dx2, FusionGrads).
    """
    dy1 = as_f64(dy1)
    dy2 = as_f64(dy2)
    if isinstance(cache, CrossAttentionCache):
        return _cross_backward(cache, dy1, dy2)
    if isinstance(cache, PixelwiseCache):
        return _pixelwise_backward(cache, dy1, dy2)
    if isinstance(cache, GeminiCache):
        return _gemini_backward(cache, dy1, dy2)
    raise ConfigError(f"fusion_backward: unrecognised cache type {type(cache).__name__}")


def _cross_backward(cache: CrossAttentionCache, dy1, dy2):
    p = cache.params
    if dy1.shape != cache.dir1.x_q.shape or dy2.shape != cache.dir2.x_q.shape:
        raise DimensionError("fusion_backward: gradient shape mismatch with cache")
    grads = _zero_fusion_grads(p, with_relation=False)
    dq1, dk1, dv1 = _attend_full_backward(cache.dir1, p.heads, dy1)
    dq2, dk2, dv2 = _attend_full_backward(cache.dir2, p.heads, dy2)
    x1, x2 = cache.dir1.x_q, cache.dir2.x_q
    # direction 1: queries x1, keys/values x2; direction 2 swapped
    dx1 = dy1 + dq1 @ p.w_query.T + dk2 @ p.w_key.T + dv2 @ p.w_value.T
    dx2 = dy2 + dq2 @ p.w_query.T + dk1 @ p.w_key.T + dv1 @ p.w_value.T
    grads.w_query += x1.T @ dq1 + x2.T @ dq2
    grads.w_key += x2.T @ dk1 + x1.T @ dk2
    grads.w_value += x2.T @ dv1 + x1.T @ dv2
    return dx1, dx2, grads


def _pixelwise_direction_backward(direction: PixelwiseDirection, heads: int, dy: np.ndarray):
    n, d = direction.proj_q.shape
    dh = d // heads
    alpha = 1.0 / np.sqrt(dh)
    dq = np.zeros_like(direction.proj_q)
    dk = np.zeros_like(direction.proj_k)
    dv = np.zeros_like(direction.proj_v)
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        w = direction.weights[:, h, :]  # exactly 1.0, kept general
        dout = dy[:, s]
        dw = np.einsum("nk,nek->ne", dout, direction.proj_v[:, None, s])
        dv[:, s] = w * dout
        dlogits = w * (dw - dw * w)  # zero for the forced single-entry softmax
        dq[:, s] = alpha * dlogits * direction.proj_k[:, s]
        dk[:, s] = alpha * dlogits * direction.proj_q[:, s]
    return dq, dk, dv


def _pixelwise_backward(cache: PixelwiseCache, dy1, dy2):
    p = cache.params
    grads = _zero_fusion_grads(p, with_relation=False)
    dq1, dk1, dv1 = _pixelwise_direction_backward(cache.dir1, p.heads, dy1)
    dq2, dk2, dv2 = _pixelwise_direction_backward(cache.dir2, p.heads, dy2)
    x1, x2 = cache.dir1.x_q, cache.dir2.x_q
    dx1 = dy1 + dq1 @ p.w_query.T + dk2 @ p.w_key.T + dv2 @ p.w_value.T
    dx2 = dy2 + dq2 @ p.w_query.T + dk1 @ p.w_key.T + dv1 @ p.w_value.T
    grads.w_query += x1.T @ dq1 + x2.T @ dq2
    grads.w_key += x2.T @ dk1 + x1.T @ dk2
    grads.w_value += x2.T @ dv1 + x1.T @ dv2
    return dx1, dx2, grads


def _gemini_backward(cache: GeminiCache, dy1, dy2):
    p = cache.params
    opts = cache.opts
    if dy1.shape != cache.dir1.x_q.shape or dy2.shape != cache.dir2.x_q.shape:
        raise DimensionError("fusion_backward: gradient shape mismatch with cache")
    grads = _zero_fusion_grads(p, with_relation=opts.relation)
    x1, x2 = cache.dir1.x_q, cache.dir2.x_q

    r1 = _gemini_direction_backward(cache.dir1, opts, p.heads, dy1)
    r2 = _gemini_direction_backward(cache.dir2, opts, p.heads, dy2)
    dq1, dpk1, dpv1_self, dpv2_cross, dx1, dphi1, dnk1, dnv1 = r1
    dq2, dpk2, dpv2_self, dpv1_cross, dx2, dphi2, dnk2, dnv2 = r2

    # value projections: self entries use the query side, cross the other side
    dpv1 = dpv1_self + dpv1_cross
    dpv2 = dpv2_self + dpv2_cross

    dx1 = dx1 + dq1 @ p.w_query.T + dpk1 @ p.w_key.T + dpv1 @ p.w_value.T
    dx2 = dx2 + dq2 @ p.w_query.T + dpk2 @ p.w_key.T + dpv2 @ p.w_value.T
    grads.w_query += x1.T @ dq1 + x2.T @ dq2
    grads.w_key += x1.T @ dpk1 + x2.T @ dpk2
    grads.w_value += x1.T @ dpv1 + x2.T @ dpv2

    use_noise = opts.noise and opts.self_entry
    if use_noise:
        dnk = dnk1 + dnk2
        dnv = dnv1 + dnv2
        # noise_proj = noise @ W, shared by both directions
        grads.noise_key += dnk @ p.w_key.T
        grads.noise_value += dnv @ p.w_value.T
        grads.w_key += np.outer(p.noise_key, dnk)
        grads.w_value += np.outer(p.noise_value, dnv)

    if opts.relation:
        da1, da2, rg1 = _relation_backward(cache.dir1.phi, dphi1)
        db2, db1, rg2 = _relation_backward(cache.dir2.phi, dphi2)
        dx1 += da1 + db1
        dx2 += da2 + db2
        for name in ("w1", "b1", "w2", "b2"):
            g1, g2 = getattr(rg1, name), getattr(rg2, name)
            if g1 is not None:
                setattr(grads.relation, name, getattr(grads.relation, name) + g1 + g2)
    return dx1, dx2, grads


# ---------------------------------------------------------------------------
# attention tracing


@dataclass
class TraceStat:
    layer: int
    self_weight: float
    cross_weight: float


def attention_trace(x1: np.ndarray, x2: np.ndarray, layers,
                    opts: GeminiOptions = DEFAULT_OPTIONS) -> list[TraceStat]:
    """Feed the pair through a stack of geminifusion layers and record the
    mean attention weight on the self vs cross entry per layer (averaged
    over tokens, heads and both directions)."""
    layers = list(layers)
    if not layers:
        raise ConfigError("attention_trace requires at least one layer")
    x1, x2 = as_f64(x1), as_f64(x2)
    stats: list[TraceStat] = []
    for idx, params in enumerate(layers):
        y1, y2, cache = geminifusion_forward(x1, x2, params, opts)
        w = np.concatenate([cache.dir1.weights, cache.dir2.weights], axis=0)
        if w.shape[-1] == 2:
            stats.append(TraceStat(idx, float(w[..., 0].mean()), float(w[..., 1].mean())))
        else:
            stats.append(TraceStat(idx, 0.0, float(w[..., 0].mean())))
        x1, x2 = y1, y2
    return stats
