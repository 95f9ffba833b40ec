"""Saliency-selected sparse attention and the encoder/decoder stacks built on it.

Only the ``u`` queries whose score rows are most peaked (max minus mean)
are softmax-aggregated; every other query receives the mean of the values.
With ``u = Lq`` the result equals dense attention.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from focalcvae import counters
from focalcvae import functional as F
from focalcvae.attention import key_mask_bias, merge_heads, multi_head_attention, split_heads
from focalcvae.counters import flop_scope
from focalcvae.errors import ConfigurationError, DimensionError, UsageError
from focalcvae.nn import FeedForward, LayerNorm, Linear, Module, sinusoidal_positions
from focalcvae.rng import Rng
from focalcvae.tensor import Tensor, concat, ones

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SaliencyConfig:
    u_factor: float = 3.0
    u_fixed: int = 0
    key_sampling: bool = False
    sample_factor: float = 5.0
    blocks: int = 2
    dense: bool = False

    def __post_init__(self):
        if self.blocks < 1:
            raise ConfigurationError(f"blocks must be >= 1, got {self.blocks}")
        if self.u_fixed < 0:
            raise ConfigurationError(f"u_fixed must be >= 0, got {self.u_fixed}")
        if self.u_factor <= 0 or self.sample_factor <= 0:
            raise ConfigurationError("u_factor and sample_factor must be positive")

    def resolve_u(self, lq: int) -> int:
        """``u = min(Lq, max(1, ceil(c * ln Lq)))`` unless fixed or dense."""
        if self.dense:
            return lq
        if self.u_fixed:
            u = self.u_fixed
        else:
            u = math.ceil(self.u_factor * math.log(lq)) if lq > 1 else 1
        return min(lq, max(1, u))

    def key_samples(self, lq: int, lk: int) -> int:
        return min(lk, max(1, math.ceil(self.sample_factor * math.log(max(lq, 2)))))


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _measure_from_scores(scores: np.ndarray, key_mask: Optional[np.ndarray]) -> np.ndarray:
    if key_mask is None:
        return scores.max(axis=-1) - scores.mean(axis=-1)
    keep = np.asarray(key_mask, dtype=bool)
    peak = np.where(keep, scores, -np.inf).max(axis=-1)
    mean = np.where(keep, scores, 0.0).sum(axis=-1) / keep.sum()
    return peak - mean


def saliency_measure(q, k, key_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-query ``max_j s_ij - mean_j s_ij`` with ``s = q k^T / sqrt(d)``.

    Works on ``[..., Lq, d]`` queries and ``[..., Lk, d]`` keys; the result
    is not part of the autodiff graph.
    """
    qd, kd = _as_array(q), _as_array(k)
    if qd.shape[-1] != kd.shape[-1]:
        raise DimensionError("query and key widths differ", qd.shape, kd.shape)
    scores = (qd @ np.swapaxes(kd, -1, -2)) * (1.0 / math.sqrt(qd.shape[-1]))
    return _measure_from_scores(scores, key_mask)


def select_top_u(measure: np.ndarray, u: int) -> np.ndarray:
    """Indices of the ``u`` largest entries, ties to the lower index, ascending."""
    measure = np.asarray(measure)
    if measure.ndim != 1:
        raise DimensionError("measure must be one-dimensional", measure.shape)
    if not 1 <= u <= measure.shape[0]:
        raise UsageError(f"u={u} outside [1, {measure.shape[0]}]")
    return _top_u_rows(measure[None, :], u)[0]


def _top_u_rows(measure: np.ndarray, u: int) -> np.ndarray:
    order = np.argsort(-measure, axis=-1, kind="stable")
    return np.sort(order[:, :u], axis=-1)


def _sampled_measure(
    qh: np.ndarray, kh: np.ndarray, n_samples: int, rng: Rng, key_mask: Optional[np.ndarray]
) -> np.ndarray:
    """Measurement against a per-query random subset of keys."""
    heads, lq, d = qh.shape
    valid = np.arange(kh.shape[1]) if key_mask is None else np.flatnonzero(key_mask)
    picks = valid[rng.integers(0, valid.size, (lq, n_samples))]
    sampled = kh[:, picks]  # [m, Lq, n, d]
    scores = np.einsum("hqd,hqnd->hqn", qh, sampled) * (1.0 / math.sqrt(d))
    counters.record("matmul", 2 * heads * lq * n_samples * d)
    return scores.max(axis=-1) - scores.mean(axis=-1)


@dataclass
class SaliencyTrace:
    """Selected query rows and their softmax weights.

    Rows that were not selected attend uniformly over the valid keys; the
    full ``[m, Lq, Lk]`` matrix is only built when ``weights`` is read.
    """

    selected: np.ndarray
    selected_weights: np.ndarray
    uniform: np.ndarray
    n_queries: int

    @property
    def weights(self) -> np.ndarray:
        heads = self.selected.shape[0]
        full = np.broadcast_to(self.uniform, (heads, self.n_queries, self.uniform.shape[0]))
        full = full.astype(self.selected_weights.dtype)
        full[np.arange(heads)[:, None], self.selected] = self.selected_weights
        return full


def saliency_core(
    qh: Tensor,
    kh: Tensor,
    vh: Tensor,
    u: int,
    key_mask: Optional[np.ndarray] = None,
    query_mask: Optional[np.ndarray] = None,
    key_sample: Optional[Tuple[int, Rng]] = None,
) -> Tuple[Tensor, SaliencyTrace]:
    """Per-head saliency attention on ``[m, L, d]`` operands.

    Scores used for the measurement are reused for the selected rows. With
    ``key_sample=(n, rng)`` the measurement uses ``n`` random keys per query
    and the selected rows are scored afresh.
    """
    heads, lq, d = qh.shape
    lk = kh.shape[1]
    if kh.shape[2] != d or vh.shape[:2] != (heads, lk):
        raise DimensionError("saliency attention operand shapes disagree", qh.shape, kh.shape, vh.shape)
    scale = 1.0 / math.sqrt(d)
    head_idx = np.arange(heads)[:, None]
    with flop_scope("attention"):
        if key_sample is None:
            scores = (qh @ kh.swapaxes(1, 2)) * scale
            measure = _measure_from_scores(scores.data, key_mask)
        else:
            scores = None
            measure = _sampled_measure(qh.data, kh.data, key_sample[0], key_sample[1], key_mask)
        if query_mask is not None:
            measure = np.where(np.asarray(query_mask, dtype=bool), measure, -np.inf)
        if not 1 <= u <= lq:
            raise UsageError(f"u={u} outside [1, {lq}]")
        idx = _top_u_rows(measure, u)
        if scores is not None:
            picked = scores[head_idx, idx]
        else:
            picked = (qh[head_idx, idx] @ kh.swapaxes(1, 2)) * scale
        mask = key_mask_bias(key_mask, picked.dtype)
        if mask is not None:
            picked = picked + mask
        w_sel = F.softmax(picked, axis=-1)
        context = w_sel @ vh

    if key_mask is None:
        mean_v = vh.mean(axis=1, keepdims=True)
        uniform = np.full(lk, 1.0 / lk)
    else:
        keep = np.asarray(key_mask, dtype=bool)
        n_valid = int(keep.sum())
        mean_v = (vh * Tensor(keep.astype(np.float64)[None, :, None], dtype=vh.dtype)).sum(axis=1, keepdims=True) * (
            1.0 / n_valid
        )
        uniform = keep / n_valid
    if u < lq:
        fill = mean_v * ones(1, lq - u, 1)
        stacked = concat([context, fill], axis=1)
        chosen = np.zeros((heads, lq), dtype=bool)
        chosen[head_idx, idx] = True
        rest = np.nonzero(~chosen)[1].reshape(heads, lq - u)
        inverse = np.argsort(np.concatenate([idx, rest], axis=1), axis=1)
        out = stacked[head_idx, inverse]
    else:
        out = context
    return out, SaliencyTrace(selected=idx, selected_weights=w_sel.data, uniform=uniform, n_queries=lq)


def saliency_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    u: int,
    key_mask: Optional[np.ndarray] = None,
    query_mask: Optional[np.ndarray] = None,
) -> Tuple[Tensor, np.ndarray]:
    """Single-head saliency attention on ``[Lq, d]``, ``[Lk, d]``, ``[Lk, dv]``.

    Returns the ``[Lq, dv]`` output and the selected query indices.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("saliency attention expects 2-D operands", q.shape, k.shape, v.shape)
    out, trace = saliency_core(
        q.reshape(1, *q.shape), k.reshape(1, *k.shape), v.reshape(1, *v.shape), u, key_mask, query_mask
    )
    return out.reshape(q.shape[0], v.shape[1]), trace.selected[0]


class SaliencyAttention(Module):
    """Projected multi-head saliency attention; queries from ``x_q``, keys/values from ``x_kv``."""

    def __init__(self, rng: Rng, dim: int, heads: int, cfg: SaliencyConfig):
        if dim % heads:
            raise ConfigurationError(f"dim {dim} is not divisible by heads {heads}")
        self.heads = heads
        self.cfg = cfg
        self.w_q = Linear(rng.fork(0), dim, dim)
        self.w_k = Linear(rng.fork(1), dim, dim)
        self.w_v = Linear(rng.fork(2), dim, dim)
        self.w_o = Linear(rng.fork(3), dim, dim)
        self.sample_rng = rng.fork(4)

    def __call__(
        self,
        x_q: Tensor,
        x_kv: Tensor,
        key_mask: Optional[np.ndarray] = None,
        query_mask: Optional[np.ndarray] = None,
    ) -> Tuple[Tensor, SaliencyTrace]:
        q, k, v = self.w_q(x_q), self.w_k(x_kv), self.w_v(x_kv)
        if self.cfg.dense:
            out, weights = multi_head_attention(q, k, v, self.heads, self.w_o, key_mask=key_mask)
            lq, lk = weights.shape[1:]
            everything = np.tile(np.arange(lq), (self.heads, 1))
            return out, SaliencyTrace(everything, weights.data, np.full(lk, 1.0 / lk), lq)
        lq, lk = x_q.shape[0], x_kv.shape[0]
        n_queries = lq if query_mask is None else int(np.count_nonzero(query_mask))
        u = self.cfg.resolve_u(n_queries)
        key_sample = None
        if self.cfg.key_sampling:
            # a fresh stream per call: the same weights and inputs always pick the same keys
            key_sample = (self.cfg.key_samples(lq, lk), self.sample_rng.fork(lq, lk))
        out, trace = saliency_core(
            split_heads(q, self.heads),
            split_heads(k, self.heads),
            split_heads(v, self.heads),
            u,
            key_mask,
            query_mask,
            key_sample,
        )
        return self.w_o(merge_heads(out)), trace


class SaliencyEncoderBlock(Module):
    """Post-norm block: ``LN(x + SA(x))`` then ``LN(x + FFN(x))``."""

    def __init__(self, rng: Rng, dim: int, heads: int, ff_dim: int, cfg: SaliencyConfig, activation: str = "none"):
        self.attn = SaliencyAttention(rng.fork(0), dim, heads, cfg)
        self.norm1 = LayerNorm(dim)
        self.ff = FeedForward(rng.fork(1), dim, ff_dim, activation)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tuple[Tensor, SaliencyTrace]:
        attended, trace = self.attn(x, x, key_mask=mask, query_mask=mask)
        x = self.norm1(x + attended)
        x = self.norm2(x + self.ff(x))
        return x, trace


class SaliencyEncoder(Module):
    """Stack of encoder blocks; the summary is the final embedding of token 0."""

    def __init__(self, rng: Rng, dim: int, heads: int, ff_dim: int, cfg: SaliencyConfig, activation: str = "none"):
        self.dim = dim
        self.blocks = [
            SaliencyEncoderBlock(rng.fork(i), dim, heads, ff_dim, cfg, activation) for i in range(cfg.blocks)
        ]

    def __call__(self, tokens: Tensor, mask: Optional[np.ndarray] = None) -> Tuple[Tensor, List[SaliencyTrace]]:
        if tokens.ndim != 2 or tokens.shape[1] != self.dim:
            raise DimensionError("encoder tokens must be [L, D]", tokens.shape, (None, self.dim))
        if mask is not None and not np.asarray(mask, dtype=bool)[0]:
            raise UsageError("the aggregation token cannot be masked")
        x = tokens + sinusoidal_positions(tokens.shape[0], self.dim)
        traces = []
        for block in self.blocks:
            x, trace = block(x, mask)
            traces.append(trace)
        return x[0], traces


class SaliencyDecoderBlock(Module):
    def __init__(self, rng: Rng, dim: int, heads: int, ff_dim: int, cfg: SaliencyConfig, activation: str = "none"):
        self.self_attn = SaliencyAttention(rng.fork(0), dim, heads, cfg)
        self.norm1 = LayerNorm(dim)
        self.cross_attn = SaliencyAttention(rng.fork(1), dim, heads, cfg)
        self.norm2 = LayerNorm(dim)
        self.ff = FeedForward(rng.fork(2), dim, ff_dim, activation)
        self.norm3 = LayerNorm(dim)

    def __call__(self, x: Tensor, memory: Tensor) -> Tuple[Tensor, SaliencyTrace]:
        attended, _ = self.self_attn(x, x)
        x = self.norm1(x + attended)
        attended, trace = self.cross_attn(x, memory)
        x = self.norm2(x + attended)
        x = self.norm3(x + self.ff(x))
        return x, trace


class SaliencyDecoder(Module):
    """Fixed positional queries cross-attend into memory; a linear head emits actions."""

    def __init__(
        self,
        rng: Rng,
        dim: int,
        heads: int,
        ff_dim: int,
        out_dim: int,
        cfg: SaliencyConfig,
        activation: str = "none",
    ):
        self.dim = dim
        self.blocks = [
            SaliencyDecoderBlock(rng.fork(i), dim, heads, ff_dim, cfg, activation) for i in range(cfg.blocks)
        ]
        self.head = Linear(rng.fork(cfg.blocks), dim, out_dim)

    def __call__(self, memory: Tensor, length: int) -> Tuple[Tensor, List[SaliencyTrace]]:
        if memory.ndim != 2 or memory.shape[1] != self.dim:
            raise DimensionError("decoder memory must be [L, D]", memory.shape, (None, self.dim))
        x = sinusoidal_positions(length, self.dim)
        traces = []
        for block in self.blocks:
            x, trace = block(x, memory)
            traces.append(trace)
        return self.head(x), traces
