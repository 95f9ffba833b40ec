"""Mixed focal attention over RGB and depth plus the proprioception projection.

Each modality runs through its own small CNN backbone, a 1x1 projection and
focal self-attention. The focal outputs are average-pooled to the reference
grid and every stream then cross-attends over the joint RGB+depth token
set. The share of attention mass landing on each modality's keys is
reported alongside the fused tokens.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from focalcvae import functional as F
from focalcvae.attention import AttentionConfig, CrossAttention, FocalAttention, FocalTrace
from focalcvae.errors import ConfigurationError, DimensionError, NumericalError
from focalcvae.nn import Conv2d, Linear, Module, Parameter
from focalcvae.rng import Rng
from focalcvae.tensor import Tensor, concat

logger = logging.getLogger(__name__)

MODALITIES = ("rgbd", "rgb", "depth")
BACKBONE_STRIDE = 4


@dataclass(frozen=True)
class PerceptionConfig:
    image_size: int = 32
    backbone_channels: int = 32
    modality: str = "rgbd"
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigurationError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.image_size % BACKBONE_STRIDE:
            raise ConfigurationError(f"image size {self.image_size} is not divisible by {BACKBONE_STRIDE}")
        self.attention.check_map(self.feature_size, self.feature_size)

    @property
    def feature_size(self) -> int:
        return self.image_size // BACKBONE_STRIDE

    @property
    def grid_size(self) -> int:
        return self.feature_size // self.attention.stride

    @property
    def tokens(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def streams(self) -> Tuple[str, ...]:
        return ("rgb", "depth") if self.modality == "rgbd" else (self.modality,)


class Backbone(Module):
    """conv3x3/2 stem, one residual block, one strided residual block: stride 4 overall."""

    def __init__(self, rng: Rng, in_channels: int, channels: int):
        self.in_channels = in_channels
        self.stem = Conv2d(rng.fork(0), in_channels, channels, 3, stride=2, pad=1)
        self.block1_a = Conv2d(rng.fork(1), channels, channels, 3)
        self.block1_b = Conv2d(rng.fork(2), channels, channels, 3)
        self.block2_a = Conv2d(rng.fork(3), channels, channels, 3, stride=2, pad=1)
        self.block2_b = Conv2d(rng.fork(4), channels, channels, 3)
        self.shortcut = Conv2d(rng.fork(5), channels, channels, 1, stride=2, pad=0)

    def __call__(self, image: Tensor) -> Tensor:
        if image.ndim != 3 or image.shape[0] != self.in_channels:
            raise DimensionError(f"backbone expects [{self.in_channels}, H, W]", image.shape)
        _, height, width = image.shape
        if height % BACKBONE_STRIDE or width % BACKBONE_STRIDE:
            raise ConfigurationError(f"image {height}x{width} is not divisible by {BACKBONE_STRIDE}")
        x = self.stem(image).relu()
        x = (x + self.block1_b(self.block1_a(x).relu())).relu()
        return (self.shortcut(x) + self.block2_b(self.block2_a(x).relu())).relu()


def avg_pool(x: Tensor, r: int) -> Tensor:
    """Non-overlapping ``r x r`` mean pooling of a ``[C, H, W]`` map."""
    if r == 1:
        return x
    c, h, w = x.shape
    return x.reshape(c, h // r, r, w // r, r).mean(axis=(2, 4))


class ModalityStream(Module):
    """Backbone -> 1x1 projection -> focal attention -> pooled grid tokens ``[T, D]``."""

    def __init__(self, rng: Rng, cfg: PerceptionConfig, in_channels: int):
        dim = cfg.attention.model_dim
        self.stride = cfg.attention.stride
        self.backbone = Backbone(rng.fork(0), in_channels, cfg.backbone_channels)
        self.proj = Conv2d(rng.fork(1), cfg.backbone_channels, dim, 1, pad=0)
        self.focal = FocalAttention(rng.fork(2), cfg.attention, cfg.feature_size, cfg.feature_size)

    def __call__(self, image: Tensor) -> Tuple[Tensor, FocalTrace]:
        attended, trace = self.focal(self.proj(self.backbone(image)))
        pooled = avg_pool(attended, self.stride)
        dim = pooled.shape[0]
        return pooled.reshape(dim, -1).transpose(1, 0), trace


@dataclass
class VisualFeature:
    tokens: Tensor
    rgb_share: float
    depth_share: float
    traces: List[FocalTrace]
    cross_weights: List[np.ndarray]


class MixedFocalAttention(Module):
    """Per-modality focal streams fused by cross-attention over the joint token set."""

    def __init__(self, rng: Rng, cfg: PerceptionConfig):
        dim = cfg.attention.model_dim
        self.cfg = cfg
        self.rgb = ModalityStream(rng.fork(0), cfg, 3) if "rgb" in cfg.streams else None
        self.depth = ModalityStream(rng.fork(1), cfg, 1) if "depth" in cfg.streams else None
        self.pos_embed = Parameter(rng.fork(2).normal((cfg.tokens, dim)) * 0.02)
        self.cross_rgb = CrossAttention(rng.fork(3), dim, cfg.attention.heads) if self.rgb is not None else None
        self.cross_depth = CrossAttention(rng.fork(4), dim, cfg.attention.heads) if self.depth is not None else None
        self.fuse_proj = Linear(rng.fork(5), dim * len(cfg.streams), dim)

    def __call__(self, rgb: Optional[Tensor], depth: Optional[Tensor]) -> VisualFeature:
        traces = []
        rgb_tokens = depth_tokens = None
        if self.rgb is not None:
            if rgb is None:
                raise DimensionError("rgb stream configured but no rgb image given")
            rgb_tokens, trace = self.rgb(rgb)
            traces.append(trace)
        if self.depth is not None:
            if depth is None:
                raise DimensionError("depth stream configured but no depth image given")
            depth_tokens, trace = self.depth(depth)
            traces.append(trace)
        feature = self.fuse(rgb_tokens, depth_tokens)
        feature.traces = traces
        return feature

    def fuse(self, rgb_tokens: Optional[Tensor], depth_tokens: Optional[Tensor]) -> VisualFeature:
        """Cross-attend the pooled stream tokens and project them to ``[T, D]``."""
        pos = self.pos_embed
        if rgb_tokens is not None and depth_tokens is not None:
            n = rgb_tokens.shape[0]
            if depth_tokens.shape != rgb_tokens.shape:
                raise DimensionError("rgb and depth token grids differ", rgb_tokens.shape, depth_tokens.shape)
            joint = concat([rgb_tokens, depth_tokens], axis=0)
            joint_pos = concat([pos, pos], axis=0)
            a, w_rgb = self.cross_rgb(rgb_tokens, joint, pos, joint_pos)
            b, w_depth = self.cross_depth(depth_tokens, joint, pos, joint_pos)
            fused = self.fuse_proj(concat([a, b], axis=1))
            mass_rgb = float(w_rgb.data[..., :n].sum(dtype=np.float64) + w_depth.data[..., :n].sum(dtype=np.float64))
            mass_depth = float(w_rgb.data[..., n:].sum(dtype=np.float64) + w_depth.data[..., n:].sum(dtype=np.float64))
            total = mass_rgb + mass_depth
            rgb_share, depth_share = mass_rgb / total, mass_depth / total
            cross = [w_rgb.data, w_depth.data]
        else:
            only = rgb_tokens if rgb_tokens is not None else depth_tokens
            cross_attn = self.cross_rgb if rgb_tokens is not None else self.cross_depth
            a, weights = cross_attn(only, only, pos, pos)
            fused = self.fuse_proj(a)
            rgb_share, depth_share = (1.0, 0.0) if rgb_tokens is not None else (0.0, 1.0)
            cross = [weights.data]
        if not math.isfinite(rgb_share):
            raise NumericalError("modality attention mass is not finite", term="shares")
        return VisualFeature(fused + pos, rgb_share, depth_share, [], cross)


@dataclass
class ProprioFeature:
    token: Tensor


class ProprioProjection(Module):
    """``concat(q_pos, q_vel) -> Linear -> GELU -> Linear``."""

    def __init__(self, rng: Rng, proprio_dim: int, dim: int, activation: str = "none"):
        self.proprio_dim = proprio_dim
        self.fc1 = Linear(rng.fork(0), proprio_dim, dim)
        self.fc2 = Linear(rng.fork(1), dim, dim)
        self.activation = activation

    def __call__(self, q_pos: Tensor, q_vel: Tensor) -> ProprioFeature:
        x = concat([q_pos.reshape(-1), q_vel.reshape(-1)], axis=0)
        if x.shape[0] != self.proprio_dim:
            raise DimensionError(f"proprioception must have {self.proprio_dim} values", x.shape)
        hidden = F.gelu(self.fc1(x.reshape(1, -1)), self.activation)
        return ProprioFeature(self.fc2(hidden).reshape(-1))
