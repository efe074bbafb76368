"""Analytic multiply-accumulate cost model for the fusion mechanisms.

Counting convention: 1 MAC = 1 FLOP (this convention reproduces the
16384^2 * 64 ~ 17G headline for full cross-attention). Only contraction
MACs are counted; softmax exponentials/divisions, elementwise scaling,
bias additions and the constant per-layer noise-vector projections
(2*d*d MACs per layer) are excluded as dominated terms. Terms are
reported per direction; a bidirectional total is also reported.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError

CONVENTION = ("1 MAC = 1 FLOP; contraction MACs only; softmax exp/div, "
              "elementwise scaling and constant per-layer setup excluded")

MECHANISMS = ("cross_attention", "geminifusion", "token_exchange")


@dataclass
class CostTerm:
    name: str
    macs: int


@dataclass
class CostReport:
    mechanism: str
    n: int
    d: int
    h: int
    terms: list[CostTerm]
    reduction_vs_cross: float | None = None

    @property
    def total_macs(self) -> int:
        """Single-direction total (sum of the per-direction terms)."""
        return sum(t.macs for t in self.terms)

    @property
    def total_macs_bidirectional(self) -> int:
        return 2 * self.total_macs

    def dominant_term(self) -> CostTerm:
        return max(self.terms, key=lambda t: t.macs)

    def to_dict(self) -> dict:
        out = {
            "mechanism": self.mechanism,
            "n": self.n,
            "d": self.d,
            "h": self.h,
            "terms": [{"name": t.name, "macs": t.macs} for t in self.terms],
            "total_macs": self.total_macs,
            "total_macs_bidirectional": self.total_macs_bidirectional,
            "reduction_vs_cross": self.reduction_vs_cross,
            "convention": CONVENTION,
        }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _validate(n: int, d: int, h: int) -> None:
    if n < 0:
        raise ConfigError(f"n must be nonnegative, got {n}")
    if d <= 0 or h <= 0:
        raise ConfigError(f"d and h must be positive, got d={d}, h={h}")
    if d % h != 0:
        raise ConfigError(f"h ({h}) must divide d ({d})")


def flops_cross_attention(n: int, d: int, h: int = 1) -> CostReport:
    """Full cross-attention: 3 projections + N^2 logits + N^2 weighted sum
    per direction. The logits term is the paper-headline dominant term."""
    _validate(n, d, h)
    terms = [
        CostTerm("q_proj", n * d * d),
        CostTerm("k_proj", n * d * d),
        CostTerm("v_proj", n * d * d),
        CostTerm("attn_logits", n * n * d),
        CostTerm("attn_weighted_sum", n * n * d),
        CostTerm("residual", 0),
    ]
    return CostReport("cross_attention", n, d, h, terms)


def flops_geminifusion(n: int, d: int, h: int = 1, phi_hidden: int | None = None) -> CostReport:
    """Pixel-wise geminifusion. Projections are counted once per modality
    (both key/value entries derive from the same projection by adds and
    scaling); per-direction projection cost is therefore 3*N*d^2."""
    _validate(n, d, h)
    hp = d if phi_hidden is None else phi_hidden
    if hp < 0:
        raise ConfigError(f"phi_hidden must be nonnegative, got {phi_hidden}")
    terms = [
        CostTerm("q_proj", n * d * d),
        CostTerm("k_proj", n * d * d),
        CostTerm("v_proj", n * d * d),
        CostTerm("relation_disc", n * (2 * d * hp + 2 * hp)),
        CostTerm("attn_logits", 2 * n * d),
        CostTerm("attn_weighted_sum", 2 * n * d),
        CostTerm("residual", 0),
    ]
    report = CostReport("geminifusion", n, d, h, terms)
    report.reduction_vs_cross = _reduction(report, flops_cross_attention(n, d, h))
    return report


def flops_token_exchange(n: int, d: int, predictor: bool = True) -> CostReport:
    """Token exchange: selection is copy-only; the score predictor
    (d -> d -> 1 per token) is the only MAC cost, once per modality."""
    _validate(n, d, 1)
    if predictor:
        terms = [
            CostTerm("predictor_hidden", n * d * d),
            CostTerm("predictor_out", n * d),
            CostTerm("selection", 0),
        ]
    else:
        terms = [CostTerm("selection", 0)]
    report = CostReport("token_exchange", n, d, 1, terms)
    report.reduction_vs_cross = _reduction(report, flops_cross_attention(n, d, 1))
    return report


def _reduction(report: CostReport, cross: CostReport) -> float | None:
    if cross.total_macs == 0:
        return None
    return 1.0 - report.total_macs / cross.total_macs


def flops_report(mechanism: str, n: int, d: int, h: int = 1,
                 phi_hidden: int | None = None) -> CostReport:
    if mechanism == "cross_attention":
        return flops_cross_attention(n, d, h)
    if mechanism == "geminifusion":
        return flops_geminifusion(n, d, h, phi_hidden)
    if mechanism == "token_exchange":
        return flops_token_exchange(n, d)
    raise ConfigError(f"unknown mechanism: {mechanism!r}")


def scaling_law(mechanism: str, d: int, n_list, h: int = 1) -> float:
    """Least-squares slope of log(total MACs) vs log(N) over n_list."""
    n_list = list(n_list)
    if len(n_list) < 2:
        raise ConfigError("scaling_law requires at least two N values")
    totals = [flops_report(mechanism, n, d, h).total_macs for n in n_list]
    if any(t <= 0 for t in totals):
        raise ConfigError("scaling_law requires positive totals (n >= 1)")
    slope, _ = np.polyfit(np.log(np.asarray(n_list, dtype=float)),
                          np.log(np.asarray(totals, dtype=float)), 1)
    return float(slope)
