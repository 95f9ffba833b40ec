import logging
from dataclasses import replace

import pytest

from focalcvae.bench import counted_forward, dense_baseline, synthetic_observation
from focalcvae.flops import (
    attention_stack_report,
    dense_attention_flops,
    flop_count,
    focal_attention_flops,
    measurement_overhead,
    saliency_attention_flops,
)
from focalcvae.perception import PerceptionConfig
from focalcvae.policy import FocalCVAEPolicy
from focalcvae.rng import Rng
from focalcvae.saliency import SaliencyConfig

from test_policy import tiny_config


def attention_ops(report):
    ops = report.by_op()
    return ops.get("matmul", 0) + ops.get("softmax", 0)


def counted_vs_closed_form(cfg):
    policy = FocalCVAEPolicy(Rng(0), cfg)
    counter = counted_forward(policy, synthetic_observation(Rng(1), cfg))
    return counter, flop_count(cfg)


class TestClosedFormMatchesInstrumented:
    @pytest.mark.parametrize(
        "variant",
        ["default", "dense", "key-sampling", "rgb-only", "long-chunk"],
    )
    def test_totals_agree(self, variant):
        cfg = tiny_config(image_size=16)
        if variant == "dense":
            cfg = dense_baseline(cfg)
        elif variant == "key-sampling":
            cfg = replace(cfg, saliency=SaliencyConfig(blocks=1, u_fixed=2, key_sampling=True, sample_factor=1.0))
        elif variant == "rgb-only":
            cfg = replace(cfg, perception=replace(cfg.perception, modality="rgb"))
        elif variant == "long-chunk":
            cfg = replace(cfg, chunk=20, saliency=SaliencyConfig(blocks=2))
            assert cfg.saliency.resolve_u(20) < 20
        counter, report = counted_vs_closed_form(cfg)
        assert counter.total() == report.total
        assert counter.total(scope="attention") == attention_ops(report)

    def test_focal_net_scope(self):
        counter, report = counted_vs_closed_form(tiny_config(image_size=16))
        pconv = sum(e.flops for e in report.entries if e.op == "pconv")
        assert counter.total(scope="focal_net") == pconv


class TestFormulas:
    def test_dense_core_at_bench_size(self):
        assert dense_attention_flops(4, 600, 600, 16)["matmul"] == 92_160_000
        assert dense_attention_flops(4, 600, 600, 32)["matmul"] == 184_320_000

    def test_saliency_stack_ratio(self):
        u = SaliencyConfig(u_factor=5.0).resolve_u(600)
        assert u == 32
        sparse = attention_stack_report("saliency", 600, 16, 4, u)
        dense = attention_stack_report("dense", 600, 16, 4, None)
        assert sparse.total == 48_921_600
        assert dense.total == 99_360_000
        assert sparse.total / dense.total <= 0.55
        assert not sparse.notes

    @pytest.mark.parametrize("r", [1, 2, 4])
    def test_focal_reduction_is_inverse_square(self, r):
        hw = 64
        focal = sum(focal_attention_flops(4, hw, hw // (r * r), 16).values())
        dense = sum(dense_attention_flops(4, hw, hw, 16).values())
        assert focal * r * r == dense

    def test_sampled_measurement(self):
        exact = saliency_attention_flops(2, 100, 100, 8, 10)
        sampled = saliency_attention_flops(2, 100, 100, 8, 10, key_samples=5)
        assert exact["softmax"] == sampled["softmax"] == 5 * 2 * 10 * 100
        assert sampled["matmul"] < exact["matmul"]

    @pytest.mark.parametrize("key_samples", [None, 6])
    def test_cost_grows_with_budget(self, key_samples):
        totals = [sum(saliency_attention_flops(4, 40, 40, 16, u, key_samples).values()) for u in range(1, 41)]
        assert all(a < b for a, b in zip(totals, totals[1:]))

    def test_counted_cost_grows_with_budget(self):
        base = tiny_config(image_size=16, chunk=8)
        totals = []
        for u in range(1, 9):
            cfg = replace(base, saliency=SaliencyConfig(blocks=1, u_fixed=u))
            counter, report = counted_vs_closed_form(cfg)
            assert counter.total() == report.total
            totals.append(counter.total(scope="attention"))
        assert all(a < b for a, b in zip(totals, totals[1:]))

    def test_full_budget_flags_overhead(self):
        assert measurement_overhead(4, 10, 10, 16, 10)
        report = attention_stack_report("short", 10, 16, 4, 10)
        assert report.notes and "u=10" in report.notes[0]

    def test_short_decoder_is_noted(self):
        report = flop_count(tiny_config())
        assert any(note.startswith("decoder.0.self") for note in report.notes)


class TestReport:
    def test_frame_has_total_row(self):
        report = flop_count(tiny_config(), label="tiny", params=123)
        frame = report.to_frame()
        assert list(frame.columns) == ["model", "group", "op", "flops"]
        total = frame[frame["group"] == "total"]
        assert len(total) == 1 and int(total["flops"].iloc[0]) == report.total
        assert report.params == 123
        assert sum(report.by_group().values()) == report.total

    def test_streams_follow_modality(self):
        cfg = tiny_config(image_size=16)
        depth_only = replace(cfg, perception=replace(cfg.perception, modality="depth"))
        groups = flop_count(depth_only).by_group()
        assert "depth.backbone" in groups and "rgb.backbone" not in groups
        assert flop_count(depth_only).total < flop_count(cfg).total

    def test_dense_baseline_costs_more(self):
        cfg = tiny_config(image_size=16)
        assert flop_count(dense_baseline(cfg)).total > flop_count(cfg).total
