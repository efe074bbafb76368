"""Finite-difference verification of every fusion backward pass.

Central differences with step 1e-5 against the analytic gradients, over
random small instances. The per-array relative error is
``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1)``.

Instances whose ReLU pre-activations sit within 1e-4 of the kink (or whose
exchange scores sit within 1e-3 of the threshold) are resampled, so the
checked loss is smooth around the evaluation point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fusion import (
    GeminiOptions,
    _relation_forward,
    _score_forward,
    cross_attention,
    fusion_backward,
    geminifusion_forward,
    init_exchange_config,
    init_fusion_params,
    init_relation_params,
    pixelwise_cross_attention,
    score_predict_backward,
    token_exchange,
    token_exchange_backward,
)
from .tensor import ConfigError, Rng

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-6
KINK_MARGIN = 1e-4
THRESHOLD_MARGIN = 1e-3

OPS = (
    "cross_attention",
    "pixelwise",
    "geminifusion",
    "geminifusion_sigmoid",
    "geminifusion_conv1x1",
    "geminifusion_ablated",
    "score_predict",
    "relation_score",
    "token_exchange",
)


@dataclass
class GradCheckEntry:
    op: str
    parameter: str
    rel_error: float


@dataclass
class SuiteReport:
    tolerance: float
    entries: list[GradCheckEntry]

    @property
    def worst(self) -> GradCheckEntry:
        return max(self.entries, key=lambda e: e.rel_error)

    @property
    def passed(self) -> bool:
        return all(e.rel_error < self.tolerance for e in self.entries)


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    numeric = np.atleast_1d(np.asarray(numeric, dtype=np.float64))
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _numeric_grad(loss_fn, array: np.ndarray, step: float) -> np.ndarray:
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = loss_fn()
        flat[i] = orig - step
        f_minus = loss_fn()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def _check_arrays(op: str, loss_fn, arrays: dict[str, np.ndarray],
                  analytic: dict[str, np.ndarray], step: float) -> list[GradCheckEntry]:
    entries = []
    for name, arr in arrays.items():
        numeric = _numeric_grad(loss_fn, arr, step)
        entries.append(GradCheckEntry(op, name, _rel_error(analytic[name], numeric)))
    return entries


def _sample_shape(rng: Rng) -> tuple[int, int, int]:
    n = int(rng.integers(1, 5))
    h = int(rng.integers(1, 3))
    d = int(rng.integers(1, 5)) * 2 if h == 2 else int(rng.integers(1, 9))
    return n, d, h


def _fusion_instance(rng: Rng, op: str):
    """Draw (params, x1, x2, opts) resampling away from ReLU kinks."""
    variant = {"geminifusion_sigmoid": "mlp2_sigmoid",
               "geminifusion_conv1x1": "conv1x1_softmax"}.get(op, "mlp2_softmax")
    opts = GeminiOptions()
    if op == "geminifusion_ablated":
        opts = GeminiOptions(noise=bool(rng.integers(0, 2)),
                             relation=bool(rng.integers(0, 2)),
                             self_entry=bool(rng.integers(0, 2)))
    for _ in range(100):
        n, d, h = _sample_shape(rng)
        p = init_fusion_params(rng, d, h, relation_variant=variant, weight_scale=0.6)
        x1 = rng.normal((n, d), 0.0, 1.0)
        x2 = rng.normal((n, d), 0.0, 1.0)
        if variant == "conv1x1_softmax" or not opts.relation:
            return p, x1, x2, opts
        pre1 = _relation_forward(x1, x2, p.relation).pre
        pre2 = _relation_forward(x2, x1, p.relation).pre
        if min(np.min(np.abs(pre1)), np.min(np.abs(pre2))) > KINK_MARGIN:
            return p, x1, x2, opts
    raise RuntimeError("could not sample an instance away from the ReLU kink")


def _check_attention_op(rng: Rng, op: str, step: float) -> list[GradCheckEntry]:
    p, x1, x2, opts = _fusion_instance(rng, op)
    r1 = rng.normal(x1.shape, 0.0, 1.0)
    r2 = rng.normal(x2.shape, 0.0, 1.0)

    if op == "cross_attention":
        forward = lambda: cross_attention(x1, x2, p)
    elif op == "pixelwise":
        forward = lambda: pixelwise_cross_attention(x1, x2, p)
    else:
        forward = lambda: geminifusion_forward(x1, x2, p, opts)

    def loss():
        y1, y2, _ = forward()
        return float(np.sum(r1 * y1) + np.sum(r2 * y2))

    _, _, cache = forward()
    dx1, dx2, grads = fusion_backward(cache, r1, r2)

    arrays = {"x1": x1, "x2": x2, "w_query": p.w_query, "w_key": p.w_key,
              "w_value": p.w_value}
    analytic = {"x1": dx1, "x2": dx2, "w_query": grads.w_query,
                "w_key": grads.w_key, "w_value": grads.w_value}
    if op.startswith("geminifusion"):
        if opts.noise and opts.self_entry:
            arrays["noise_key"] = p.noise_key
            arrays["noise_value"] = p.noise_value
            analytic["noise_key"] = grads.noise_key
            analytic["noise_value"] = grads.noise_value
        if opts.relation:
            arrays["relation.w1"] = p.relation.w1
            arrays["relation.b1"] = p.relation.b1
            analytic["relation.w1"] = grads.relation.w1
            analytic["relation.b1"] = grads.relation.b1
            if p.relation.w2 is not None:
                arrays["relation.w2"] = p.relation.w2
                arrays["relation.b2"] = p.relation.b2
                analytic["relation.w2"] = grads.relation.w2
                analytic["relation.b2"] = grads.relation.b2
    return _check_arrays(op, loss, arrays, analytic, step)


def _check_score_predict(rng: Rng, step: float) -> list[GradCheckEntry]:
    for _ in range(100):
        n, d, _ = _sample_shape(rng)
        cfg = init_exchange_config(rng, d, theta=0.5, scale=0.6)
        x = rng.normal((n, d), 0.0, 1.0)
        if np.min(np.abs(_score_forward(x, cfg).pre)) > KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not sample a score predictor instance away from the kink")
    r = rng.normal((n,), 0.0, 1.0)

    def loss():
        return float(np.sum(r * _score_forward(x, cfg).scores))

    cache = _score_forward(x, cfg)
    dx, grads = score_predict_backward(cache, r)
    arrays = {"x": x, "w1": cfg.w1, "b1": cfg.b1, "w2": cfg.w2, "b2": cfg.b2}
    analytic = {"x": dx, "w1": grads.w1, "b1": grads.b1, "w2": grads.w2, "b2": grads.b2}
    return _check_arrays("score_predict", loss, arrays, analytic, step)


def _check_relation(rng: Rng, step: float) -> list[GradCheckEntry]:
    from .fusion import _relation_backward

    variant = ("mlp2_softmax", "mlp2_sigmoid", "conv1x1_softmax")[int(rng.integers(0, 3))]
    for _ in range(100):
        n, d, _ = _sample_shape(rng)
        params = init_relation_params(rng, d, variant, scale=0.6)
        x1 = rng.normal((n, d), 0.0, 1.0)
        x2 = rng.normal((n, d), 0.0, 1.0)
        if variant == "conv1x1_softmax":
            break
        if np.min(np.abs(_relation_forward(x1, x2, params).pre)) > KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not sample a relation instance away from the kink")
    r = rng.normal((n,), 0.0, 1.0)

    def loss():
        return float(np.sum(r * _relation_forward(x1, x2, params).score))

    cache = _relation_forward(x1, x2, params)
    dx1, dx2, grads = _relation_backward(cache, r)
    arrays = {"x1": x1, "x2": x2, "w1": params.w1, "b1": params.b1}
    analytic = {"x1": dx1, "x2": dx2, "w1": grads.w1, "b1": grads.b1}
    if params.w2 is not None:
        arrays["w2"] = params.w2
        arrays["b2"] = params.b2
        analytic["w2"] = grads.w2
        analytic["b2"] = grads.b2
    return _check_arrays(f"relation_score[{variant}]", loss, arrays, analytic, step)


def _check_exchange(rng: Rng, step: float) -> list[GradCheckEntry]:
    theta = 0.5
    for _ in range(100):
        n, d, _ = _sample_shape(rng)
        x1 = rng.normal((n, d), 0.0, 1.0)
        x2 = rng.normal((n, d), 0.0, 1.0)
        s1 = rng.uniform((n,), 0.05, 0.95)
        s2 = rng.uniform((n,), 0.05, 0.95)
        if min(np.min(np.abs(s1 - theta)), np.min(np.abs(s2 - theta))) > THRESHOLD_MARGIN:
            break
    else:
        raise RuntimeError("could not sample exchange scores away from the threshold")
    r1 = rng.normal((n, d), 0.0, 1.0)
    r2 = rng.normal((n, d), 0.0, 1.0)

    def loss():
        y1, y2, _ = token_exchange(x1, x2, s1, s2, theta)
        return float(np.sum(r1 * y1) + np.sum(r2 * y2))

    _, _, masks = token_exchange(x1, x2, s1, s2, theta)
    dx1, dx2 = token_exchange_backward(masks, r1, r2)
    # scores receive no gradient through the hard indicator; the true
    # derivative is zero almost everywhere, so finite differences agree
    arrays = {"x1": x1, "x2": x2, "s1": s1, "s2": s2}
    analytic = {"x1": dx1, "x2": dx2, "s1": np.zeros_like(s1), "s2": np.zeros_like(s2)}
    return _check_arrays("token_exchange", loss, arrays, analytic, step)


def run_gradient_suite(seed: int = 0, instances: int = 20, step: float = DEFAULT_STEP,
                       tolerance: float = DEFAULT_TOLERANCE,
                       perturb_op: str | None = None) -> SuiteReport:
    """Run `instances` finite-difference checks cycling over all ops.

    `perturb_op` is a fault-injection hook for testing the harness itself:
    entries for that op get a corrupted analytic gradient.
    """
    if instances <= 0:
        raise ConfigError(f"instances must be positive, got {instances}")
    rng = Rng(seed)
    entries: list[GradCheckEntry] = []
    for i in range(instances):
        op = OPS[i % len(OPS)]
        if op == "score_predict":
            got = _check_score_predict(rng, step)
        elif op == "relation_score":
            got = _check_relation(rng, step)
        elif op == "token_exchange":
            got = _check_exchange(rng, step)
        else:
            got = _check_attention_op(rng, op, step)
        if perturb_op is not None and op == perturb_op:
            got = [GradCheckEntry(e.op, e.parameter, e.rel_error + 1e-2) for e in got]
        entries.extend(got)
    return SuiteReport(tolerance, entries)
