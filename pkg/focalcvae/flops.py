"""Closed-form FLOP counts.

Counting rules: matmul and conv2d cost 2 FLOPs per multiply-accumulate,
softmax 5 FLOPs per element; elementwise ops, reductions, normalization and
bilinear sampling are free. Every formula here mirrors exactly the kernels
the modules execute, so an instrumented run under
:class:`~focalcvae.counters.FlopCounter` gives the same integers.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import pandas as pd

from focalcvae import functional as F
from focalcvae.policy import PolicyConfig

logger = logging.getLogger(__name__)

COUNTING_RULE = "FLOPs = 2 x MAC for matmul/conv2d; softmax = 5 per element"


@dataclass
class FlopEntry:
    group: str
    op: str
    flops: int


@dataclass
class FlopReport:
    label: str
    entries: List[FlopEntry] = field(default_factory=list)
    params: int = 0
    notes: List[str] = field(default_factory=list)

    def add(self, group: str, op: str, flops: int) -> None:
        self.entries.append(FlopEntry(group, op, int(flops)))

    def extend(self, group: str, counts: Dict[str, int]) -> None:
        for op, n in counts.items():
            self.add(group, op, n)

    @property
    def total(self) -> int:
        return sum(e.flops for e in self.entries)

    def by_group(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for e in self.entries:
            out[e.group] = out.get(e.group, 0) + e.flops
        return out

    def by_op(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for e in self.entries:
            out[e.op] = out.get(e.op, 0) + e.flops
        return out

    def to_frame(self) -> pd.DataFrame:
        rows = [{"model": self.label, "group": e.group, "op": e.op, "flops": e.flops} for e in self.entries]
        rows.append({"model": self.label, "group": "total", "op": "all", "flops": self.total})
        return pd.DataFrame(rows, columns=["model", "group", "op", "flops"])


# ---- per-kernel formulas ---------------------------------------------------


def linear_flops(rows: int, in_features: int, out_features: int) -> int:
    return 2 * rows * in_features * out_features


def conv_flops(c_in: int, c_out: int, kernel: int, h_out: int, w_out: int) -> int:
    return 2 * c_in * c_out * kernel * kernel * h_out * w_out


def pconv_flops(channels: int, p_ratio: float, height: int, width: int, kernel: int = 3) -> int:
    c_p = F.partial_channels(channels, p_ratio)
    return conv_flops(c_p, c_p, kernel, height, width)


def dense_attention_flops(heads: int, lq: int, lk: int, d: int) -> Dict[str, int]:
    """Score and aggregation matmuls plus the softmax."""
    return {"matmul": 4 * heads * lq * lk * d, "softmax": 5 * heads * lq * lk}


def focal_attention_flops(heads: int, hw: int, points: int, d: int) -> Dict[str, int]:
    return dense_attention_flops(heads, hw, points, d)


def saliency_attention_flops(
    heads: int, lq: int, lk: int, d: int, u: int, key_samples: Optional[int] = None
) -> Dict[str, int]:
    """Measurement, selected-row softmax and aggregation.

    Exact measurement reuses its scores for the selected rows; sampled
    measurement scores the selected rows again.
    """
    if key_samples is None:
        measure = 2 * heads * lq * lk * d
        rescore = 0
    else:
        measure = 2 * heads * lq * key_samples * d
        rescore = 2 * heads * u * lk * d
    return {
        "matmul": measure + rescore + 2 * heads * u * lk * d,
        "softmax": 5 * heads * u * lk,
    }


def measurement_overhead(heads: int, lq: int, lk: int, d: int, u: int, key_samples: Optional[int] = None) -> bool:
    saliency = sum(saliency_attention_flops(heads, lq, lk, d, u, key_samples).values())
    return saliency >= sum(dense_attention_flops(heads, lq, lk, d).values())


# ---- whole-model reports ---------------------------------------------------


def _sequence_attention(report: FlopReport, group: str, cfg: PolicyConfig, lq: int, lk: int) -> None:
    dim, heads = cfg.model_dim, cfg.heads
    d = dim // heads
    report.add(group, "projection", linear_flops(lq, dim, dim) * 2 + linear_flops(lk, dim, dim) * 2)
    sal = cfg.saliency
    if sal.dense:
        report.extend(group, dense_attention_flops(heads, lq, lk, d))
        return
    u = sal.resolve_u(lq)
    samples = sal.key_samples(lq, lk) if sal.key_sampling else None
    report.extend(group, saliency_attention_flops(heads, lq, lk, d, u, samples))
    if measurement_overhead(heads, lq, lk, d, u, samples):
        note = f"{group}: u={u} of Lq={lq}, measurement costs more than it saves"
        if note not in report.notes:
            report.notes.append(note)


def _stream(report: FlopReport, cfg: PolicyConfig, name: str, in_channels: int) -> None:
    p = cfg.perception
    att = p.attention
    c, dim, heads = p.backbone_channels, att.model_dim, att.heads
    s2, s4 = p.image_size // 2, p.image_size // 4
    backbone = (
        conv_flops(in_channels, c, 3, s2, s2)
        + 2 * conv_flops(c, c, 3, s2, s2)
        + 2 * conv_flops(c, c, 3, s4, s4)
        + conv_flops(c, c, 1, s4, s4)
    )
    report.add(f"{name}.backbone", "conv2d", backbone)
    report.add(f"{name}.proj", "conv2d", conv_flops(c, dim, 1, s4, s4))
    hw = s4 * s4
    points = p.tokens if not att.dense else hw
    group = f"{name}.focal"
    report.add(group, "projection", linear_flops(hw, dim, dim) * 2 + linear_flops(points, dim, dim) * 2)
    if not att.dense:
        report.add(group, "pconv", pconv_flops(dim, att.p_ratio, s4, s4))
        report.add(group, "offsets", linear_flops(points, dim, 2))
    report.extend(group, focal_attention_flops(heads, hw, points, dim // heads))


def _cross(report: FlopReport, cfg: PolicyConfig, name: str, n_keys: int) -> None:
    p = cfg.perception
    dim, heads = p.attention.model_dim, p.attention.heads
    t = p.tokens
    group = f"{name}.cross"
    report.add(group, "projection", linear_flops(t, dim, dim) * 2 + linear_flops(n_keys, dim, dim) * 2)
    report.extend(group, dense_attention_flops(heads, t, n_keys, dim // heads))


def flop_count(cfg: PolicyConfig, label: str = "focal-cvae", params: int = 0) -> FlopReport:
    """FLOPs of one inference forward pass (perception, proprioception, decoder)."""
    report = FlopReport(label, params=params)
    streams = cfg.perception.streams
    channels = {"rgb": 3, "depth": 1}
    for name in streams:
        _stream(report, cfg, name, channels[name])
    t = cfg.perception.tokens
    for name in streams:
        _cross(report, cfg, name, t * len(streams))
    dim = cfg.model_dim
    report.add("fuse", "projection", linear_flops(t, dim * len(streams), dim))
    report.add("proprio", "projection", linear_flops(1, cfg.proprio_dim, dim) + linear_flops(1, dim, dim))
    report.add("latent", "projection", linear_flops(1, cfg.z_dim, dim))
    k, memory = cfg.chunk, t + 2
    for i in range(cfg.saliency.blocks):
        _sequence_attention(report, f"decoder.{i}.self", cfg, k, k)
        _sequence_attention(report, f"decoder.{i}.cross", cfg, k, memory)
        report.add(f"decoder.{i}.ff", "projection", linear_flops(k, dim, cfg.ff_dim) + linear_flops(k, cfg.ff_dim, dim))
    report.add("decoder.head", "projection", linear_flops(k, dim, cfg.action_dim))
    return report


def attention_stack_report(
    label: str, length: int, head_dim: int, heads: int, u: Optional[int], key_samples: Optional[int] = None
) -> FlopReport:
    """Core attention FLOPs of one ``length x length`` layer; ``u=None`` is dense."""
    report = FlopReport(label)
    if u is None:
        report.extend("attention", dense_attention_flops(heads, length, length, head_dim))
    else:
        report.extend("attention", saliency_attention_flops(heads, length, length, head_dim, u, key_samples))
        if measurement_overhead(heads, length, length, head_dim, u, key_samples):
            report.notes.append(f"u={u} of Lq={length}: measurement costs more than it saves")
    return report
