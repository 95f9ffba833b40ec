"""Run configuration: a flat set of ``key=value`` settings.

Settings come from dataclass defaults, then an optional config file (parsed
with python-dotenv, ``#`` comments allowed), then explicit CLI flags.
"""

import hashlib
import io
import logging
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from dotenv import dotenv_values

from focalcvae.attention import AttentionConfig
from focalcvae.env import check_degradation
from focalcvae.errors import ConfigurationError
from focalcvae.perception import PerceptionConfig
from focalcvae.policy import PolicyConfig, TrainConfig
from focalcvae.saliency import SaliencyConfig

logger = logging.getLogger(__name__)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # perception
    image_size: int = 32
    backbone_channels: int = 32
    model_dim: int = 64
    heads: int = 4
    downsample: int = 2
    offset_scale: float = 2.0
    p_ratio: float = 0.25
    gelu: str = "none"
    modality: str = "rgbd"
    # saliency attention
    u_factor: float = 3.0
    u_fixed: int = 0
    key_sampling: bool = False
    sample_factor: float = 5.0
    blocks: int = 2
    ff_dim: int = 128
    # cvae
    z_dim: int = 16
    chunk: int = 10
    encoder_visual: bool = False
    # training
    lambda_kl: float = 10.0
    lambda_reconst: float = 1.0
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    warmup_fraction: float = 0.1
    batch_size: int = 8
    steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 50
    # data and evaluation
    episodes: int = 50
    episode_length: int = 60
    degradation: str = "none"
    rollouts: int = 50
    # benchmark
    bench_length: int = 600
    bench_head_dim: int = 16
    bench_u: int = 32
    bench_image_size: int = 64
    bench_key_sampling: bool = True
    bench_warmup: int = 10
    bench_iters: int = 100

    def __post_init__(self):
        for name in self.degradation.split(","):
            check_degradation(name.strip())
        self.policy_config()
        self.bench_policy_config()
        self.train_config()

    # ---- loading --------------------------------------------------------

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: Optional["RunConfig"] = None) -> "RunConfig":
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        coerced = {key: _coerce(key, value, types[key]) for key, value in values.items()}
        return replace(base, **coerced)

    @classmethod
    def from_text(cls, text: str, base: Optional["RunConfig"] = None) -> "RunConfig":
        return cls.from_mapping(_parse(dotenv_values(stream=io.StringIO(text))), base)

    @classmethod
    def from_file(cls, path: Union[str, Path], base: Optional["RunConfig"] = None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise OSError(f"config file not found: {path}")
        return cls.from_mapping(_parse(dotenv_values(path)), base)

    # ---- rendering ------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{key}={_render(value)}\n" for key, value in sorted(asdict(self).items()))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:12]

    # ---- derived configs ------------------------------------------------

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            model_dim=self.model_dim,
            heads=self.heads,
            downsample=self.downsample,
            offset_scale=self.offset_scale,
            p_ratio=self.p_ratio,
            activation=self.gelu,
        )

    def saliency_config(self) -> SaliencyConfig:
        return SaliencyConfig(
            u_factor=self.u_factor,
            u_fixed=self.u_fixed,
            key_sampling=self.key_sampling,
            sample_factor=self.sample_factor,
            blocks=self.blocks,
        )

    def policy_config(self) -> PolicyConfig:
        perception = PerceptionConfig(
            image_size=self.image_size,
            backbone_channels=self.backbone_channels,
            modality=self.modality,
            attention=self.attention_config(),
        )
        return PolicyConfig(
            perception=perception,
            saliency=self.saliency_config(),
            z_dim=self.z_dim,
            chunk=self.chunk,
            ff_dim=self.ff_dim,
            encoder_visual=self.encoder_visual,
        )

    def bench_policy_config(self) -> PolicyConfig:
        """The policy at ``bench_image_size``, where pixel attention dominates the forward pass."""
        policy = self.policy_config()
        return replace(policy, perception=replace(policy.perception, image_size=self.bench_image_size))

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lambda_kl=self.lambda_kl,
            lambda_reconst=self.lambda_reconst,
            lr=self.lr,
            lr_schedule=self.lr_schedule,
            warmup_fraction=self.warmup_fraction,
            batch_size=self.batch_size,
            steps=self.steps,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.adam_eps,
            log_every=self.log_every,
        )


def _parse(values: Mapping[str, Optional[str]]) -> Dict[str, str]:
    missing = sorted(k for k, v in values.items() if v is None)
    if missing:
        raise ConfigurationError(f"config keys without a value: {', '.join(missing)}")
    return {k.strip().lower(): v.strip() for k, v in values.items()}


def _coerce(key: str, value: Any, kind: Any) -> Any:
    kind_name = kind if isinstance(kind, str) else kind.__name__
    if not isinstance(value, str):
        return value
    try:
        if kind_name == "bool":
            lowered = value.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(value)
        if kind_name == "int":
            return int(value, 0)
        if kind_name == "float":
            return float(value)
    except ValueError:
        raise ConfigurationError(f"{key}={value!r} is not a valid {kind_name}") from None
    return value


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def env_flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in _TRUE
