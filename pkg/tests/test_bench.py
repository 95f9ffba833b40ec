import logging

import pytest

from focalcvae.bench import LATENCY_PAIRS, BenchResult, LatencyStats, dense_baseline, latency_bench, run_bench
from focalcvae.config import RunConfig
from focalcvae.errors import UsageError

from test_policy import tiny_config


class TestLatencyBench:
    def test_requires_an_iteration(self):
        with pytest.raises(UsageError):
            latency_bench(lambda: None, 0, 0)

    def test_stats(self):
        calls = []
        stats = latency_bench(lambda: calls.append(1), 2, 5, "noop")
        assert len(calls) == 7
        assert stats.iterations == 5
        assert stats.p95_ms >= stats.median_ms >= 0.0
        assert "numpy-" in stats.hardware


def test_dense_baseline_keeps_dimensions():
    cfg = tiny_config(image_size=16)
    dense = dense_baseline(cfg)
    assert dense.perception.attention.dense and dense.saliency.dense
    assert dense.model_dim == cfg.model_dim and dense.chunk == cfg.chunk


def test_run_bench_reports_both_models(caplog):
    with caplog.at_level(logging.WARNING, logger="focalcvae.bench"):
        result = run_bench(tiny_config(image_size=16), seed=0, length=40, head_dim=4, u=5, n_warmup=0, n_iter=2)
    assert "closed-form" not in caplog.text
    flops = result.flop_frame()
    totals = flops[flops["group"] == "total"].set_index("model")["flops"]
    assert list(totals.index) == ["focal-cvae", "dense-baseline", "saliency-attention", "dense-attention"]
    assert totals["focal-cvae"] < totals["dense-baseline"]
    assert totals["saliency-attention"] < totals["dense-attention"]
    assert (flops["params"] >= 0).all()
    latency = result.latency_frame()
    assert list(latency["label"]) == list(totals.index)
    assert (latency["p95_ms"] >= latency["median_ms"]).all()


def test_speedup_reads_medians():
    result = BenchResult([], [LatencyStats("ours", 2.0, 3.0, 5, "cpu"), LatencyStats("dense", 5.0, 6.0, 5, "cpu")])
    assert result.speedup("ours", "dense") == pytest.approx(2.5)
    with pytest.raises(UsageError):
        result.median("missing")


@pytest.mark.slow
def test_ours_is_faster_than_dense_at_bench_defaults():
    config = RunConfig()
    result = run_bench(
        config.bench_policy_config(),
        config.seed,
        config.bench_length,
        config.bench_head_dim,
        config.bench_u,
        config.bench_warmup,
        config.bench_iters,
        key_sampling=config.bench_key_sampling,
        sample_factor=config.sample_factor,
    )
    for ours, baseline in LATENCY_PAIRS:
        assert result.median(ours) < result.median(baseline), (ours, result.latency_frame())
