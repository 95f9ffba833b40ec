"""Wall-clock latency and FLOP comparison against the dense baseline.

Benchmarks use synthetic inputs only and never touch dataset files.
"""

import logging
import os
import platform
import time
from dataclasses import dataclass, replace
from typing import Callable, List, Tuple

import numpy as np
import pandas as pd

from focalcvae.counters import FlopCounter
from focalcvae.errors import UsageError
from focalcvae.flops import FlopReport, attention_stack_report, flop_count
from focalcvae.policy import FocalCVAEPolicy, PolicyConfig
from focalcvae.rng import Rng
from focalcvae.saliency import SaliencyAttention, SaliencyConfig
from focalcvae.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass
class LatencyStats:
    label: str
    median_ms: float
    p95_ms: float
    iterations: int
    hardware: str


def hardware_string() -> str:
    threads = os.environ.get("OMP_NUM_THREADS", "unset")
    return f"{platform.machine()} {platform.processor() or 'cpu'} numpy-{np.__version__} threads={threads}"


def latency_bench(fn: Callable[[], object], n_warmup: int, n_iter: int, label: str = "") -> LatencyStats:
    """Median and 95th-percentile wall time of ``fn()`` after warmup."""
    if n_iter < 1:
        raise UsageError(f"latency bench needs at least one iteration, got {n_iter}")
    for _ in range(max(n_warmup, 0)):
        fn()
    times = np.empty(n_iter)
    for i in range(n_iter):
        start = time.perf_counter()
        fn()
        times[i] = (time.perf_counter() - start) * 1e3
    median = float(np.median(times))
    p95 = max(float(np.percentile(times, 95)), median)
    logger.info("%s: median %.3f ms, p95 %.3f ms over %d runs", label or "bench", median, p95, n_iter)
    return LatencyStats(label, median, p95, n_iter, hardware_string())


def dense_baseline(cfg: PolicyConfig) -> PolicyConfig:
    """Same dimensions with dense pixel attention and dense sequence attention."""
    perception = replace(cfg.perception, attention=replace(cfg.perception.attention, dense=True))
    return replace(cfg, perception=perception, saliency=replace(cfg.saliency, dense=True))


def synthetic_observation(rng: Rng, cfg: PolicyConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    size = cfg.perception.image_size
    return (
        rng.uniform(0.0, 1.0, (3, size, size)),
        rng.uniform(0.0, 1.0, (1, size, size)),
        rng.normal(cfg.proprio_dim),
    )


def counted_forward(policy: FocalCVAEPolicy, obs) -> FlopCounter:
    """Instrumented FLOP count of one ``predict`` call."""
    with FlopCounter() as counter:
        policy.predict(*obs)
    return counter


@dataclass
class BenchResult:
    flops: List[FlopReport]
    latency: List[LatencyStats]

    def flop_frame(self) -> pd.DataFrame:
        frames = [r.to_frame().assign(params=r.params) for r in self.flops]
        return pd.concat(frames, ignore_index=True)

    def latency_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(s) for s in self.latency])

    def median(self, label: str) -> float:
        for stats in self.latency:
            if stats.label == label:
                return stats.median_ms
        raise UsageError(f"no latency entry labelled {label!r}")

    def speedup(self, ours: str, baseline: str) -> float:
        """``median(baseline) / median(ours)``; above 1 means ours is faster."""
        return self.median(baseline) / max(self.median(ours), 1e-9)


LATENCY_PAIRS = (("focal-cvae", "dense-baseline"), ("saliency-attention", "dense-attention"))


def run_bench(
    cfg: PolicyConfig,
    seed: int,
    length: int,
    head_dim: int,
    u: int,
    n_warmup: int,
    n_iter: int,
    key_sampling: bool = True,
    sample_factor: float = 5.0,
) -> BenchResult:
    """Policy forward passes and a long-sequence attention layer, ours vs dense.

    The long layer ranks queries against ``ceil(sample_factor * ln L)``
    sampled keys per query unless ``key_sampling`` is off; the exact
    measurement scores every key and cannot beat dense attention on time.
    """
    rng = Rng(seed)
    obs = synthetic_observation(rng.fork(0), cfg)
    reports, stats = [], []
    for label, model_cfg in (("focal-cvae", cfg), ("dense-baseline", dense_baseline(cfg))):
        policy = FocalCVAEPolicy(rng.fork(1), model_cfg)
        report = flop_count(model_cfg, label, params=policy.num_parameters())
        counted = counted_forward(policy, obs).total()
        if counted != report.total:
            logger.warning("%s: closed-form %d FLOPs but counted %d", label, report.total, counted)
        reports.append(report)
        stats.append(latency_bench(lambda: policy.predict(*obs), n_warmup, n_iter, label))

    heads = cfg.heads
    dim = heads * head_dim
    tokens = Tensor(rng.fork(2).normal((length, dim)))
    sparse_cfg = SaliencyConfig(u_fixed=u, key_sampling=key_sampling, sample_factor=sample_factor)
    samples = sparse_cfg.key_samples(length, length) if key_sampling else None
    for label, sal_cfg, u_value in (
        ("saliency-attention", sparse_cfg, u),
        ("dense-attention", SaliencyConfig(dense=True), None),
    ):
        layer = SaliencyAttention(rng.fork(3), dim, heads, sal_cfg)
        reports.append(attention_stack_report(label, length, head_dim, heads, u_value, samples if u_value else None))

        def forward(layer=layer):
            with no_grad():
                layer(tokens, tokens)

        stats.append(latency_bench(forward, n_warmup, n_iter, label))
    return BenchResult(reports, stats)
