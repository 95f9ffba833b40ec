"""The Focal-CVAE policy: posterior encoder, conditioned decoder, losses and training.

Training encodes the ground-truth action chunk (plus proprioception) into a
Gaussian latent, samples it, and decodes a chunk conditioned on the visual
and proprioceptive features. Inference decodes from the prior mean ``z = 0``.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd

from focalcvae import env
from focalcvae import functional as F
from focalcvae.dataset import EpisodeDataset, TrainingSample, sample_batch
from focalcvae.errors import ConfigurationError, NumericalError, UsageError
from focalcvae.nn import Linear, Module, Parameter
from focalcvae.optim import Adam, warmup_cosine
from focalcvae.perception import MixedFocalAttention, PerceptionConfig, ProprioFeature, ProprioProjection, VisualFeature
from focalcvae.rng import Rng
from focalcvae.saliency import SaliencyConfig, SaliencyEncoder, SaliencyDecoder
from focalcvae.tensor import Tensor, concat, no_grad, zeros

logger = logging.getLogger(__name__)

LOGVAR_LIMIT = 10.0
LR_SCHEDULES = ("cosine", "constant")


@dataclass(frozen=True)
class PolicyConfig:
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)
    z_dim: int = 16
    chunk: int = 10
    ff_dim: int = 128
    action_dim: int = env.ACTION_DIM
    proprio_dim: int = env.PROPRIO_DIM
    encoder_visual: bool = False

    def __post_init__(self):
        if self.chunk < 1 or self.z_dim < 1:
            raise ConfigurationError(f"chunk and z_dim must be >= 1, got {self.chunk}, {self.z_dim}")
        if self.proprio_dim % 2:
            raise ConfigurationError("proprioception holds positions and velocities of equal length")

    @property
    def model_dim(self) -> int:
        return self.perception.attention.model_dim

    @property
    def heads(self) -> int:
        return self.perception.attention.heads

    @property
    def activation(self) -> str:
        return self.perception.attention.activation


@dataclass(frozen=True)
class TrainConfig:
    lambda_kl: float = 10.0
    lambda_reconst: float = 1.0
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    warmup_fraction: float = 0.1
    batch_size: int = 8
    steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 50

    def __post_init__(self):
        if self.lambda_kl < 0 or self.lambda_reconst < 0 or self.lambda_kl == self.lambda_reconst == 0:
            raise ConfigurationError("loss weights must be non-negative and not both zero")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigurationError(f"invalid batch_size={self.batch_size} or steps={self.steps}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigurationError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")

    @property
    def warmup_steps(self) -> int:
        return max(2, int(self.warmup_fraction * self.steps)) if self.warmup_fraction else 0

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        return warmup_cosine(step, self.steps, self.lr, self.warmup_steps)


@dataclass
class ActionChunk:
    actions: np.ndarray

    def __post_init__(self):
        if self.actions.ndim != 2 or self.actions.shape[0] < 1:
            raise UsageError(f"an action chunk is [k, action_dim], got {self.actions.shape}")

    @property
    def k(self) -> int:
        return self.actions.shape[0]


class ActionNormalizer:
    """Affine map of the action limits onto ``[-1, 1]`` per dimension."""

    def __init__(self, low: np.ndarray = env.ACTION_LOW, high: np.ndarray = env.ACTION_HIGH):
        self.centre = 0.5 * (np.asarray(high, dtype=np.float64) + np.asarray(low, dtype=np.float64))
        self.scale = 0.5 * (np.asarray(high, dtype=np.float64) - np.asarray(low, dtype=np.float64))
        if np.any(self.scale <= 0):
            raise ConfigurationError("action limits must satisfy low < high")

    def normalize(self, actions: np.ndarray) -> np.ndarray:
        return (np.asarray(actions, dtype=np.float64) - self.centre) / self.scale

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.scale + self.centre


@dataclass
class LatentState:
    mu: Tensor
    logvar: Tensor
    z: Tensor


@dataclass
class LossTerms:
    reconst: Tensor
    reg: Tensor
    total: Tensor


def loss_reconst(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over every chunk entry."""
    return F.mse(pred, target)


def loss_reg(mu: Tensor, logvar: Tensor) -> Tensor:
    """``KL(N(mu, exp(logvar)) || N(0, I)) = 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)``."""
    return ((mu * mu + logvar.exp() - 1.0 - logvar).sum()) * 0.5


def total_loss(reconst: Tensor, reg: Tensor, cfg: TrainConfig) -> Tensor:
    return reg * cfg.lambda_kl + reconst * cfg.lambda_reconst


def reparameterize(mu: Tensor, logvar: Tensor, rng: Rng) -> Tensor:
    eps = Tensor(rng.normal(mu.shape), dtype=mu.dtype)
    return mu + (logvar.clip(-LOGVAR_LIMIT, LOGVAR_LIMIT) * 0.5).exp() * eps


class FocalCVAEPolicy(Module):
    def __init__(self, rng: Rng, cfg: PolicyConfig):
        dim = cfg.model_dim
        self.cfg = cfg
        self.perception = MixedFocalAttention(rng.fork(0), cfg.perception)
        self.proprio = ProprioProjection(rng.fork(1), cfg.proprio_dim, dim, cfg.activation)
        self.agg_token = Parameter(rng.fork(2).normal((1, dim)) * 0.02)
        self.encoder_proprio = Linear(rng.fork(3), cfg.proprio_dim, dim)
        self.action_embed = Linear(rng.fork(4), cfg.action_dim, dim)
        self.encoder = SaliencyEncoder(rng.fork(5), dim, cfg.heads, cfg.ff_dim, cfg.saliency, cfg.activation)
        self.latent_head = Linear(rng.fork(6), dim, 2 * cfg.z_dim, zero_init=True)
        self.latent_proj = Linear(rng.fork(7), cfg.z_dim, dim)
        self.decoder = SaliencyDecoder(
            rng.fork(8), dim, cfg.heads, cfg.ff_dim, cfg.action_dim, cfg.saliency, cfg.activation
        )
        self.normalizer = ActionNormalizer()

    # ---- building blocks ------------------------------------------------

    def observe(self, rgb: np.ndarray, depth: np.ndarray, proprio: np.ndarray) -> Tuple[VisualFeature, ProprioFeature]:
        half = self.cfg.proprio_dim // 2
        p = Tensor(proprio)
        visual = self.perception(Tensor(rgb), Tensor(depth))
        return visual, self.proprio(p[:half], p[half:])

    def encode(self, actions: Tensor, proprio: Tensor, visual: Optional[VisualFeature] = None) -> Tuple[Tensor, Tensor]:
        """Posterior ``(mu, logvar)`` of the latent given an action chunk."""
        cfg = self.cfg
        if actions.ndim != 2 or actions.shape[0] != cfg.chunk:
            raise UsageError(f"encoder expects a chunk of {cfg.chunk} actions, got shape {actions.shape}")
        parts = [self.agg_token, self.encoder_proprio(proprio.reshape(1, -1)), self.action_embed(actions)]
        if cfg.encoder_visual:
            if visual is None:
                raise UsageError("encoder_visual is set but no visual feature was given")
            parts.append(visual.tokens)
        summary, _ = self.encoder(concat(parts, axis=0))
        stats = self.latent_head(summary.reshape(1, -1)).reshape(-1)
        mu = stats[: cfg.z_dim]
        logvar = stats[cfg.z_dim :].clip(-LOGVAR_LIMIT, LOGVAR_LIMIT)
        return mu, logvar

    def decode(self, z: Tensor, visual: VisualFeature, proprio: ProprioFeature) -> Tensor:
        """``[k, action_dim]`` chunk conditioned on the latent and observation features."""
        memory = concat(
            [
                visual.tokens,
                proprio.token.reshape(1, -1),
                self.latent_proj(z.reshape(1, -1)),
            ],
            axis=0,
        )
        actions, _ = self.decoder(memory, self.cfg.chunk)
        return actions

    # ---- training and inference ------------------------------------------

    def losses(self, sample: TrainingSample, rng: Rng, train_cfg: TrainConfig) -> Tuple[LossTerms, LatentState]:
        visual, prop = self.observe(sample.rgb, sample.depth, sample.proprio)
        target = Tensor(self.normalizer.normalize(sample.actions))
        mu, logvar = self.encode(target, Tensor(sample.proprio), visual)
        z = reparameterize(mu, logvar, rng)
        pred = self.decode(z, visual, prop)
        reconst = loss_reconst(pred, target)
        reg = loss_reg(mu, logvar)
        return LossTerms(reconst, reg, total_loss(reconst, reg, train_cfg)), LatentState(mu, logvar, z)

    def predict(self, rgb: np.ndarray, depth: np.ndarray, proprio: np.ndarray) -> ActionChunk:
        with no_grad():
            visual, prop = self.observe(rgb, depth, proprio)
            actions = self.decode(zeros(self.cfg.z_dim), visual, prop)
        return ActionChunk(np.clip(self.normalizer.inverse(actions.data), env.ACTION_LOW, env.ACTION_HIGH))

    def as_chunk_policy(self) -> Callable[[env.Frame], np.ndarray]:
        return lambda frame: self.predict(frame.rgb, frame.depth, frame.proprio).actions


@dataclass
class StepResult:
    step: int
    reconst: float
    reg: float
    total: float


def train_step(
    policy: FocalCVAEPolicy,
    batch: List[TrainingSample],
    optimizer: Adam,
    cfg: TrainConfig,
    rng: Rng,
    step: int = 0,
) -> StepResult:
    """One Adam update on the batch-averaged objective."""
    if not batch:
        raise UsageError("empty training batch")
    optimizer.zero_grad()
    scale = 1.0 / len(batch)
    reconst = reg = total = None
    for i, sample in enumerate(batch):
        terms, _ = policy.losses(sample, rng.fork(step, i), cfg)
        reconst = terms.reconst if reconst is None else reconst + terms.reconst
        reg = terms.reg if reg is None else reg + terms.reg
        total = terms.total if total is None else total + terms.total
    result = StepResult(step, reconst.item() * scale, reg.item() * scale, total.item() * scale)
    for term in ("reconst", "reg", "total"):
        if not math.isfinite(getattr(result, term)):
            raise NumericalError("loss is not finite", step=step, term=term)
    (total * scale).backward()
    optimizer.step()
    return result


def make_optimizer(policy: FocalCVAEPolicy, cfg: TrainConfig) -> Adam:
    return Adam(policy.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


def train(
    policy: FocalCVAEPolicy,
    data: EpisodeDataset,
    cfg: TrainConfig,
    rng: Rng,
    on_step: Optional[Callable[[StepResult], None]] = None,
) -> List[StepResult]:
    """Run ``cfg.steps`` updates on batches drawn from ``data``."""
    optimizer = make_optimizer(policy, cfg)
    batches, noise = rng.fork(0), rng.fork(1)
    history = []
    for step in range(cfg.steps):
        optimizer.lr = cfg.lr_at(step)
        batch = sample_batch(data, batches, cfg.batch_size, policy.cfg.chunk)
        result = train_step(policy, batch, optimizer, cfg, noise, step)
        history.append(result)
        if on_step is not None:
            on_step(result)
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            logger.info(
                "step %d: total %.5f reconst %.5f reg %.5f lr %.2e",
                step, result.total, result.reconst, result.reg, optimizer.lr,
            )
    return history


def loss_history_frame(history: List[StepResult]) -> pd.DataFrame:
    return pd.DataFrame([vars(r) for r in history], columns=["step", "reconst", "reg", "total"])
