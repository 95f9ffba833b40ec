"""Dense, focal (deformable) and cross multi-head attention.

Focal attention lets every pixel query attend only to features sampled at a
reference grid shifted by learned offsets. The offsets come from the focal
net (PConv -> GELU -> 1x1 conv) applied to the query map, and a continuous
relative-position bias table adds a displacement-dependent term to the
scores.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from focalcvae import functional as F
from focalcvae.counters import flop_scope
from focalcvae.errors import ConfigurationError, DimensionError
from focalcvae.nn import LayerNorm, Linear, Module, Parameter, zeros_parameter
from focalcvae.rng import Rng
from focalcvae.tensor import Tensor, get_default_dtype

logger = logging.getLogger(__name__)

MASK_FILL = -1e9


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int = 64
    heads: int = 4
    downsample: int = 2
    offset_scale: float = 2.0
    p_ratio: float = 0.25
    dense: bool = False
    activation: str = "none"

    def __post_init__(self):
        if self.heads < 1 or self.model_dim % self.heads:
            raise ConfigurationError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.downsample < 1:
            raise ConfigurationError(f"downsample must be >= 1, got {self.downsample}")
        if self.offset_scale <= 0:
            raise ConfigurationError(f"offset_scale must be > 0, got {self.offset_scale}")
        if not 0.0 < self.p_ratio <= 1.0:
            raise ConfigurationError(f"p_ratio must lie in (0, 1], got {self.p_ratio}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def stride(self) -> int:
        """Grid factor actually used; dense attention keeps every pixel."""
        return 1 if self.dense else self.downsample

    def check_map(self, height: int, width: int) -> None:
        r = self.stride
        if height % r or width % r:
            raise ConfigurationError(f"downsample {r} does not divide feature map {height}x{width}")


def _cell_centres(extent: int, r: int) -> np.ndarray:
    if extent == 1:
        return np.zeros(1, dtype=np.float64)
    pixel = np.arange(extent // r, dtype=np.float64) * r + 0.5 * (r - 1)
    return pixel / (extent - 1) * 2.0 - 1.0


def reference_grid(height: int, width: int, r: int) -> Tensor:
    """Cell centres of an ``(H/r) x (W/r)`` lattice as normalized ``(x, y)`` rows.

    Points are ordered row-major over the grid.
    """
    if r < 1 or height % r or width % r:
        raise ConfigurationError(f"grid factor {r} does not divide {height}x{width}")
    xs = _cell_centres(width, r)
    ys = _cell_centres(height, r)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    return Tensor(np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1))


def deformable_sample(x_map: Tensor, grid: Tensor, offsets: Tensor) -> Tensor:
    """Features of ``x_map[C,H,W]`` at ``grid + offsets`` -> ``[P, C]``."""
    if grid.shape != offsets.shape:
        raise DimensionError("grid and offsets differ in shape", grid.shape, offsets.shape)
    return F.bilinear_sample(x_map, grid + offsets)


def key_mask_bias(key_mask: Optional[np.ndarray], dtype) -> Optional[Tensor]:
    if key_mask is None:
        return None
    return Tensor(np.where(np.asarray(key_mask, dtype=bool), 0.0, MASK_FILL), dtype=dtype)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[L, m*d]`` -> ``[m, L, d]``."""
    length, dim = x.shape
    return x.reshape(length, heads, dim // heads).transpose(1, 0, 2)


def merge_heads(x: Tensor) -> Tensor:
    """``[m, L, d]`` -> ``[L, m*d]``."""
    heads, length, d = x.shape
    return x.transpose(1, 0, 2).reshape(length, heads * d)


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    out_proj: Optional[Linear] = None,
    bias: Optional[Tensor] = None,
    key_mask: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Tensor]:
    """Scaled dot-product attention over already-projected ``q, k, v``.

    Returns the merged (and optionally output-projected) values ``[Lq, D]``
    and the per-head weights ``[m, Lq, Lk]``.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("attention expects 2-D token matrices", q.shape, k.shape, v.shape)
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0] or q.shape[1] % heads:
        raise DimensionError("attention operand shapes disagree", q.shape, k.shape, v.shape)
    lq, lk = q.shape[0], k.shape[0]
    if bias is not None and bias.shape != (heads, lq, lk):
        raise DimensionError("attention bias must be [m, Lq, Lk]", bias.shape, (heads, lq, lk))
    scale = 1.0 / math.sqrt(q.shape[1] // heads)
    with flop_scope("attention"):
        scores = (split_heads(q, heads) @ split_heads(k, heads).swapaxes(1, 2)) * scale
        if bias is not None:
            scores = scores + bias
        mask = key_mask_bias(key_mask, scores.dtype)
        if mask is not None:
            scores = scores + mask
        weights = F.softmax(scores, axis=-1)
        context = weights @ split_heads(v, heads)
    out = merge_heads(context)
    if out_proj is not None:
        out = out_proj(out)
    return out, weights


def relative_bias(query_points: Tensor, sampled_points: Tensor, table: Tensor) -> Tensor:
    """Look up ``table[m, 2H-1, 2W-1]`` at each query/point displacement.

    Displacements are in normalized units; halving them maps the full
    ``[-2, 2]`` range onto the table's ``[-1, 1]`` coordinates so the centre
    entry is zero displacement and one table cell is one query pixel.
    Returns ``[m, Lq, P]``.
    """
    lq, p = query_points.shape[0], sampled_points.shape[0]
    disp = (query_points.reshape(lq, 1, 2) - sampled_points.reshape(1, p, 2)) * 0.5
    values = F.bilinear_sample(table, disp.reshape(lq * p, 2))
    return values.reshape(lq, p, table.shape[0]).transpose(2, 0, 1)


class FocalNet(Module):
    """Offset predictor: PConv(3x3) -> GELU -> 1x1 conv to two channels.

    The 1x1 conv is linear, so it is applied after sampling the activation
    at the reference points. Raw offsets go through ``s * tanh`` and are
    expressed in normalized units of ``s`` grid cells.
    """

    def __init__(self, rng: Rng, cfg: AttentionConfig, height: int, width: int):
        c_p = F.partial_channels(cfg.model_dim, cfg.p_ratio)
        bound = 1.0 / math.sqrt(c_p * 9)
        self.pconv_weight = Parameter(rng.uniform(-bound, bound, (c_p, c_p, 3, 3)))
        self.pconv_bias = zeros_parameter(c_p)
        self.proj = Linear(rng.fork(1), cfg.model_dim, 2, zero_init=True)
        self.p_ratio = cfg.p_ratio
        self.activation = cfg.activation
        r, s = cfg.stride, cfg.offset_scale
        self.offset_limit = np.array([s * 2.0 * r / width, s * 2.0 * r / height], dtype=get_default_dtype())

    def __call__(self, q_map: Tensor, grid: Tensor) -> Tensor:
        with flop_scope("focal_net"):
            hidden = F.gelu(F.pconv(q_map, self.pconv_weight, self.p_ratio, self.pconv_bias), self.activation)
            raw = self.proj(F.bilinear_sample(hidden, grid))
        return raw.tanh() * Tensor(self.offset_limit, dtype=raw.dtype)


@dataclass
class FocalTrace:
    weights: np.ndarray
    points: np.ndarray
    offsets: np.ndarray


class FocalAttention(Module):
    """Pre-norm focal self-attention over a ``[C, H, W]`` map with residual."""

    def __init__(self, rng: Rng, cfg: AttentionConfig, height: int, width: int):
        cfg.check_map(height, width)
        dim = cfg.model_dim
        self.cfg = cfg
        self.hw = (height, width)
        self.norm = LayerNorm(dim)
        self.w_q = Linear(rng.fork(0), dim, dim)
        self.w_k = Linear(rng.fork(1), dim, dim)
        self.w_v = Linear(rng.fork(2), dim, dim)
        self.w_o = Linear(rng.fork(3), dim, dim)
        self.pixels = reference_grid(height, width, 1)
        if cfg.dense:
            self.focal_net = None
            self.bias_table = None
        else:
            self.grid = reference_grid(height, width, cfg.stride)
            self.focal_net = FocalNet(rng.fork(4), cfg, height, width)
            self.bias_table = zeros_parameter(cfg.heads, 2 * height - 1, 2 * width - 1)

    def __call__(self, x: Tensor) -> Tuple[Tensor, FocalTrace]:
        channels, height, width = x.shape
        if (height, width) != self.hw or channels != self.cfg.model_dim:
            raise DimensionError("focal attention input does not match its configuration", x.shape, (self.cfg.model_dim,) + self.hw)
        tokens = x.reshape(channels, height * width).transpose(1, 0)
        normed = self.norm(tokens)
        q = self.w_q(normed)
        if self.focal_net is None:
            sampled, points, offsets, bias = normed, self.pixels, None, None
        else:
            q_map = q.transpose(1, 0).reshape(channels, height, width)
            offsets = self.focal_net(q_map, self.grid)
            points = self.grid + offsets
            sampled = F.bilinear_sample(normed.transpose(1, 0).reshape(channels, height, width), points)
            bias = relative_bias(self.pixels, points, self.bias_table)
        attended, weights = multi_head_attention(
            q, self.w_k(sampled), self.w_v(sampled), self.cfg.heads, self.w_o, bias
        )
        out = (tokens + attended).transpose(1, 0).reshape(channels, height, width)
        trace = FocalTrace(
            weights=weights.data,
            points=points.data,
            offsets=np.zeros_like(points.data) if offsets is None else offsets.data,
        )
        return out, trace


class CrossAttention(Module):
    """Queries from stream ``a``, keys and values from stream ``b``.

    Positions are added to the query and key inputs only; the attended
    result is added back to ``a``.
    """

    def __init__(self, rng: Rng, dim: int, heads: int):
        self.heads = heads
        self.norm_a = LayerNorm(dim)
        self.norm_b = LayerNorm(dim)
        self.w_q = Linear(rng.fork(0), dim, dim)
        self.w_k = Linear(rng.fork(1), dim, dim)
        self.w_v = Linear(rng.fork(2), dim, dim)
        self.w_o = Linear(rng.fork(3), dim, dim)

    def __call__(
        self,
        a: Tensor,
        b: Tensor,
        pos_a: Optional[Tensor] = None,
        pos_b: Optional[Tensor] = None,
    ) -> Tuple[Tensor, Tensor]:
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
            raise DimensionError("cross-attention streams differ in width", a.shape, b.shape)
        na, nb = self.norm_a(a), self.norm_b(b)
        qa = na + pos_a if pos_a is not None else na
        kb = nb + pos_b if pos_b is not None else nb
        attended, weights = multi_head_attention(self.w_q(qa), self.w_k(kb), self.w_v(nb), self.heads, self.w_o)
        return a + attended, weights
