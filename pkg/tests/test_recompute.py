"""Selective recomputation under the global causal mask, and overhead accounting."""

import numpy as np
import pytest

from chunkkv import (
    ConfigurationError,
    CostModelParams,
    assemble,
    cache_fidelity,
    full_prefill,
    make_plan,
    measure_overhead,
    prefill_chunk,
    recompute_selected,
)
from chunkkv.cache import Provenance
from chunkkv.recompute import RecomputePlan
from tests.conftest import make_chunks


@pytest.fixture(scope="module")
def chunked(tiny_weights):
    rng = np.random.default_rng(21)
    toks = rng.integers(0, 64, 32)
    chunks = make_chunks(toks, [8, 8, 8, 8])
    cache = assemble([prefill_chunk(tiny_weights, c) for c in chunks])
    ref = full_prefill(tiny_weights, toks)
    return toks, cache, ref


class TestRecomputeSelected:
    def test_full_budget_reproduces_full_prefill(self, tiny_weights, chunked):
        _, cache, ref = chunked
        plan = make_plan(cache, np.arange(cache.context_length))
        out = recompute_selected(tiny_weights, cache, plan)
        fid = cache_fidelity(out, ref, tiny_weights.config.rope_base)
        assert fid.max_abs <= 1e-4
        assert (out.provenance[: cache.context_length] == int(Provenance.RECOMPUTED_GLOBAL)).all()

    def test_empty_plan_is_identity(self, tiny_weights, chunked):
        _, cache, _ = chunked
        plan = make_plan(cache, np.array([], dtype=np.int64))
        assert recompute_selected(tiny_weights, cache, plan) is cache

    def test_single_chunk_recompute_is_fixed_point(self, tiny_weights):
        # K=1: chunk-local positions equal global positions, so recomputation
        # must land on the same KV values it started from.
        rng = np.random.default_rng(5)
        toks = rng.integers(0, 64, 16)
        (chunk,) = make_chunks(toks, [16])
        cache = assemble([prefill_chunk(tiny_weights, chunk)])
        plan = make_plan(cache, np.array([2, 5, 9, 15]))
        out = recompute_selected(tiny_weights, cache, plan)
        for li in range(cache.n_layers):
            np.testing.assert_allclose(out.keys[li], cache.keys[li], atol=1e-5)
            np.testing.assert_allclose(out.values[li], cache.values[li], atol=1e-5)

    def test_partial_budget_reduces_distance(self, tiny_weights, chunked):
        _, cache, ref = chunked
        base = cache_fidelity(cache, ref, tiny_weights.config.rope_base).frobenius
        plan = make_plan(cache, np.arange(16, 32))  # the two stale tail chunks
        out = recompute_selected(tiny_weights, cache, plan)
        after = cache_fidelity(out, ref, tiny_weights.config.rope_base).frobenius
        assert after < base

    def test_idempotent_for_same_plan(self, tiny_weights, chunked):
        _, cache, _ = chunked
        plan = make_plan(cache, np.array([3, 11, 20, 29]))
        once = recompute_selected(tiny_weights, cache, plan)
        twice = recompute_selected(tiny_weights, once, plan)
        for li in range(cache.n_layers):
            np.testing.assert_allclose(twice.keys[li], once.keys[li], atol=1e-10)
            np.testing.assert_allclose(twice.values[li], once.values[li], atol=1e-10)

    def test_untouched_rows_bit_identical(self, tiny_weights, chunked):
        _, cache, _ = chunked
        sel = np.array([10, 25])
        out = recompute_selected(tiny_weights, cache, make_plan(cache, sel))
        keep = np.setdiff1d(np.arange(cache.context_length), sel)
        for li in range(cache.n_layers):
            assert out.keys[li][keep].tobytes() == cache.keys[li][keep].tobytes()
            assert out.values[li][keep].tobytes() == cache.values[li][keep].tobytes()

    def test_mapping_and_order_preserved(self, tiny_weights, chunked):
        _, cache, _ = chunked
        out = recompute_selected(tiny_weights, cache, make_plan(cache, np.array([1, 30])))
        assert out.chunk_ids == cache.chunk_ids
        assert [out.mapping(i) for i in range(32)] == [cache.mapping(i) for i in range(32)]

    def test_plan_validation(self, chunked):
        _, cache, _ = chunked
        with pytest.raises(ConfigurationError):
            make_plan(cache, np.array([0, 0]))
        with pytest.raises(ConfigurationError):
            make_plan(cache, np.array([cache.context_length]))
        with pytest.raises(ConfigurationError):
            RecomputePlan(
                selected=np.array([5, 2]), positions=np.array([5, 2]), allowed_upto=np.array([5, 2])
            )
        with pytest.raises(ConfigurationError):
            # anti-causal horizon
            RecomputePlan(
                selected=np.array([5]), positions=np.array([5]), allowed_upto=np.array([4])
            )


class TestMeasureOverhead:
    def test_reports_finite_factor(self, tiny_weights, chunked):
        _, cache, _ = chunked
        plan = make_plan(cache, np.arange(0, 32, 4))
        report = measure_overhead(tiny_weights, cache, plan, repetitions=3)
        assert not report.degenerate
        assert report.ideal_flops > 0
        assert np.isfinite(report.overhead_factor)
        assert report.overhead_factor > 0

    def test_zero_budget_flagged_degenerate(self, tiny_weights, chunked):
        _, cache, _ = chunked
        plan = make_plan(cache, np.array([], dtype=np.int64))
        report = measure_overhead(tiny_weights, cache, plan, repetitions=3)
        assert report.degenerate
        assert report.ideal_flops == 0.0
        assert report.overhead_factor > 0  # inf

    def test_ideal_flops_linear_in_k(self, tiny_weights, chunked):
        _, cache, _ = chunked
        params = CostModelParams()
        r1 = measure_overhead(tiny_weights, cache, make_plan(cache, np.arange(4)), 3, params=params)
        r2 = measure_overhead(tiny_weights, cache, make_plan(cache, np.arange(8)), 3, params=params)
        assert r2.ideal_flops == pytest.approx(2 * r1.ideal_flops, rel=1e-12)

    def test_repetition_floor(self, tiny_weights, chunked):
        _, cache, _ = chunked
        with pytest.raises(ConfigurationError):
            measure_overhead(tiny_weights, cache, make_plan(cache, np.arange(4)), repetitions=2)
