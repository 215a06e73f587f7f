"""Analytic TTFT model and the in-process parallel prefill executor."""

import os

import numpy as np
import pytest

from chunkkv import (
    ChunkSpec,
    ConfigurationError,
    CostModelParams,
    comm_volume_bytes,
    estimate_ttft,
    init_weights,
    run_parallel_prefill,
    simulate,
)
from chunkkv.costmodel import CacheRegistry, dense_prefill_flops, recompute_flops
from tests.conftest import make_chunks


class TestEstimates:
    def test_strictly_increasing_in_seq_len(self):
        p = CostModelParams()
        for strategy in ("single_prefill", "ring_attention", "ours"):
            vals = [estimate_ttft(p, n, strategy) for n in (4096, 8192, 16384, 32768, 65536)]
            assert all(a < b for a, b in zip(vals, vals[1:])), strategy

    def test_single_device_ring_degenerates(self):
        p = CostModelParams(device_count=1)
        assert estimate_ttft(p, 8192, "ring_attention") == estimate_ttft(p, 8192, "single_prefill")

    def test_zero_ratio_no_link_single_device(self):
        # With one device, no recomputation, and free links, ours is exactly a
        # full prefill plus the selection pass.
        p = CostModelParams(device_count=1, recompute_ratio=0.0, link_latency_s=0.0)
        ours = estimate_ttft(p, 8192, "ours")
        single = estimate_ttft(p, 8192, "single_prefill")
        from chunkkv.costmodel import _selection_flops

        assert ours == pytest.approx(single + _selection_flops(p, 8192) * p.sec_per_flop, rel=1e-12)

    def test_zero_ratio_bounded_by_divided_dense(self):
        # Chunk-local attention is (N/D)^2 per device, so ours at r=0 with free
        # links never exceeds single/D plus the selection term.
        p = CostModelParams(device_count=4, recompute_ratio=0.0, link_latency_s=1e-30, sec_per_byte=1e-30)
        from chunkkv.costmodel import _selection_flops

        for n in (8192, 16384):
            ours = estimate_ttft(p, n, "ours")
            bound = estimate_ttft(p, n, "single_prefill") / 4 + _selection_flops(p, n) * p.sec_per_flop
            assert ours <= bound * (1 + 1e-9)

    def test_unknown_strategy(self):
        with pytest.raises(ConfigurationError):
            estimate_ttft(CostModelParams(), 8192, "quantum")

    def test_seq_len_below_devices_rejected(self):
        with pytest.raises(ConfigurationError):
            estimate_ttft(CostModelParams(device_count=4), 2, "ours")

    def test_param_validation(self):
        with pytest.raises(ConfigurationError):
            CostModelParams(sec_per_flop=0.0)
        with pytest.raises(ConfigurationError):
            CostModelParams(device_count=0)
        with pytest.raises(ConfigurationError):
            CostModelParams(recompute_ratio=1.5)
        with pytest.raises(ConfigurationError):
            CostModelParams(locality_fraction=-0.1)


class TestTrends:
    def test_speedup_of_single_is_exactly_one(self):
        report = simulate(CostModelParams(), 8192)
        assert report.speedup["single_prefill"] == 1.0

    def test_ours_beats_ring_at_long_contexts(self):
        p = CostModelParams()  # 4 devices, ratio 0.15
        for n in (16384, 32768):
            r = simulate(p, n)
            assert r.speedup["ours"] > r.speedup["ring_attention"]

    def test_ours_speedup_monotone_in_seq_len(self):
        p = CostModelParams()
        s = [simulate(p, n).speedup["ours"] for n in (8192, 16384, 32768)]
        assert s[0] < s[1] < s[2]

    def test_speedup_gap_non_decreasing(self):
        p = CostModelParams()
        gaps = [
            simulate(p, n).speedup["ours"] - simulate(p, n).speedup["ring_attention"]
            for n in (8192, 16384, 32768)
        ]
        assert gaps[0] <= gaps[1] <= gaps[2]

    def test_comm_volume_ours_never_exceeds_ring(self):
        p = CostModelParams()
        for n in (8192, 16384, 32768):
            assert comm_volume_bytes(p, n, "ours") <= comm_volume_bytes(p, n, "ring_attention")

    def test_flop_breakdown_reported(self):
        report = simulate(CostModelParams(), 8192)
        for part in ("projection", "attention", "mlp", "recompute"):
            assert report.flop_breakdown[part] > 0

    def test_recompute_flops_linear_in_tokens(self):
        a = recompute_flops(4, 64, 256, 10, 1000)
        b = recompute_flops(4, 64, 256, 20, 1000)
        assert b == pytest.approx(2 * a, rel=1e-12)

    def test_dense_flops_quadratic_attention_term(self):
        # doubling N more than doubles the dense cost (attention is quadratic)
        f1 = dense_prefill_flops(4, 64, 256, 4096)
        f2 = dense_prefill_flops(4, 64, 256, 8192)
        assert f2 > 2 * f1


class TestParallelPrefill:
    def test_worker_counts_byte_identical(self, tiny_weights):
        rng = np.random.default_rng(0)
        toks = rng.integers(0, 64, 64)
        chunks = make_chunks(toks, [16, 16, 16, 16])
        results = {}
        for workers in (1, 2, 4):
            caches, _ = run_parallel_prefill(tiny_weights, chunks, workers)
            results[workers] = b"".join(
                k.tobytes() + v.tobytes() for c in caches for k, v in zip(c.keys, c.values)
            )
        assert results[1] == results[2] == results[4]

    def test_result_order_matches_input(self, tiny_weights):
        chunks = make_chunks(np.arange(24), [8, 8, 8])
        caches, _ = run_parallel_prefill(tiny_weights, chunks, 2)
        assert [c.chunk_id for c in caches] == ["c0", "c1", "c2"]

    def test_empty_chunk_list(self, tiny_weights):
        caches, elapsed = run_parallel_prefill(tiny_weights, [], 4)
        assert caches == []
        assert elapsed >= 0

    def test_worker_floor(self, tiny_weights):
        with pytest.raises(ConfigurationError):
            run_parallel_prefill(tiny_weights, [], 0)

    def test_registry_rejects_duplicates(self):
        reg = CacheRegistry()
        reg.insert("a", object())
        with pytest.raises(ConfigurationError):
            reg.insert("a", object())

    @pytest.mark.skipif((os.cpu_count() or 1) < 4, reason="needs >= 4 cores for a meaningful timing")
    def test_parallel_faster_than_sequential(self, toy_config_fixture):
        w = init_weights(toy_config_fixture, 0)
        rng = np.random.default_rng(0)
        toks = rng.integers(0, 256, 2048)
        chunks = make_chunks(toks, [512, 512, 512, 512])
        run_parallel_prefill(w, chunks, 1)  # warm
        _, sequential = run_parallel_prefill(w, chunks, 1)
        _, parallel = run_parallel_prefill(w, chunks, 4)
        assert parallel < 0.9 * sequential
