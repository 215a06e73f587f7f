"""Analytic TTFT model for sequence-parallel prefilling, plus a worker-pool prefill.

Three strategies are modeled:

  single_prefill   full dense prefill on one device.
  ring_attention   dense work divided across devices; every layer rotates KV
                   blocks around the ring for device_count - 1 steps, so each
                   device receives (device_count - 1) blocks of N/device_count
                   rows per layer.
  ours             per-device chunk-local prefill (quadratic only within the
                   chunk), a prompt-conditioned selection pass, recomputation of
                   ratio * N tokens split across devices, and communication of
                   only the non-local selected rows.

FLOP counts use 2 flops per multiply-accumulate; softmax and normalization are
ignored. Communication time is modeled as volume * sec_per_byte plus a fixed
latency per hop, not overlapped with compute. Absolute times are not
calibrated targets; the model's content is the scaling structure, and the
default rates are chosen so an 8K-token dense prefill lands in the hundreds of
milliseconds on paper-scale model dimensions.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from threading import Lock
from typing import Sequence

from .errors import ConfigurationError

STRATEGIES = ("single_prefill", "ring_attention", "ours")


# ---------------------------------------------------------------------------
# FLOP counting
# ---------------------------------------------------------------------------


def per_token_linear_flops(d_model: int, d_ff: int) -> float:
    """QKV+output projections (8 d^2) plus the gated MLP (6 d d_ff), per layer."""
    return 8.0 * d_model * d_model + 6.0 * d_model * d_ff


def causal_attention_flops(n_layers: int, d_model: int, n_tokens: int) -> float:
    """Score and value matmuls for causal attention: 4 d sum_i (i+1) per layer."""
    return 4.0 * d_model * (n_tokens * (n_tokens + 1) / 2.0) * n_layers


def cross_attention_flops(n_layers: int, d_model: int, n_queries: int, n_keys: int) -> float:
    """Dense rows-attending-to-keys cost: 4 d * queries * keys per layer."""
    return 4.0 * d_model * n_queries * n_keys * n_layers


def dense_prefill_flops(n_layers: int, d_model: int, d_ff: int, n_tokens: int) -> float:
    return n_tokens * per_token_linear_flops(d_model, d_ff) * n_layers + causal_attention_flops(
        n_layers, d_model, n_tokens
    )


def recompute_flops(n_layers: int, d_model: int, d_ff: int, n_tokens: int, n_keys: int) -> float:
    """Dense-equivalent cost of recomputing n_tokens rows against n_keys keys."""
    return n_tokens * per_token_linear_flops(d_model, d_ff) * n_layers + cross_attention_flops(
        n_layers, d_model, n_tokens, n_keys
    )


# ---------------------------------------------------------------------------
# Parameters and estimates
# ---------------------------------------------------------------------------


@dataclass
class CostModelParams:
    """Rates, topology, and model dimensions for the TTFT model.

    The two free rate parameters are sec_per_flop and sec_per_byte.
    locality_fraction is the share of selected tokens whose recomputation stays
    on the device that owns their chunk, so only (1 - locality_fraction) of the
    selected rows cross the interconnect.
    """

    sec_per_flop: float = 4.0e-15
    sec_per_byte: float = 2.0e-11
    link_latency_s: float = 1.0e-5
    device_count: int = 4
    n_layers: int = 32
    d_model: int = 4096
    d_ff: int = 14336
    n_heads: int = 32
    d_head: int = 128
    recompute_ratio: float = 0.15
    bytes_per_kv_element: int = 2
    locality_fraction: float = 0.5
    prompt_length: int = 256

    def __post_init__(self):
        if self.sec_per_flop <= 0 or self.sec_per_byte <= 0:
            raise ConfigurationError("rate parameters must be positive")
        if self.link_latency_s < 0:
            raise ConfigurationError("link latency must be >= 0")
        if self.device_count < 1:
            raise ConfigurationError(f"device_count must be >= 1, got {self.device_count}")
        if not 0.0 <= self.recompute_ratio <= 1.0:
            raise ConfigurationError("recompute_ratio must be in [0, 1]")
        if not 0.0 <= self.locality_fraction <= 1.0:
            raise ConfigurationError("locality_fraction must be in [0, 1]")
        if self.bytes_per_kv_element < 1:
            raise ConfigurationError("bytes_per_kv_element must be >= 1")
        if min(self.n_layers, self.d_model, self.d_ff, self.prompt_length) < 1:
            raise ConfigurationError("model dimensions must be >= 1")

    def kv_bytes_per_token(self) -> float:
        """K and V rows across all layers for one token."""
        return 2.0 * self.d_model * self.n_layers * self.bytes_per_kv_element


def _selection_flops(p: CostModelParams, n: int) -> float:
    m = p.prompt_length
    return m * per_token_linear_flops(p.d_model, p.d_ff) * p.n_layers + cross_attention_flops(
        p.n_layers, p.d_model, m, n + m
    )


def comm_volume_bytes(params: CostModelParams, seq_len: int, strategy: str) -> float:
    """Total bytes crossing inter-device links for one prefill."""
    d = params.device_count
    if strategy == "single_prefill" or d == 1:
        return 0.0
    if strategy == "ring_attention":
        block = math.ceil(seq_len / d)
        return d * (d - 1) * block * params.kv_bytes_per_token()
    if strategy == "ours":
        k = math.ceil(params.recompute_ratio * seq_len)
        remote = k * (1.0 - params.locality_fraction)
        return remote * params.kv_bytes_per_token()
    raise ConfigurationError(f"unknown strategy {strategy!r}")


def estimate_ttft(params: CostModelParams, seq_len: int, strategy: str) -> float:
    """Estimated seconds to the first token for one strategy."""
    if seq_len < params.device_count:
        raise ConfigurationError(
            f"seq_len {seq_len} must be >= device_count {params.device_count}"
        )
    p = params
    d = p.device_count
    dense = dense_prefill_flops(p.n_layers, p.d_model, p.d_ff, seq_len)

    if strategy == "single_prefill":
        return dense * p.sec_per_flop

    if strategy == "ring_attention":
        compute = dense / d * p.sec_per_flop
        comm = 0.0
        if d > 1:
            block = math.ceil(seq_len / d)
            per_device_bytes = (d - 1) * block * p.kv_bytes_per_token()
            comm = per_device_bytes * p.sec_per_byte + p.n_layers * (d - 1) * p.link_latency_s
        return compute + comm

    if strategy == "ours":
        chunk = math.ceil(seq_len / d)
        chunk_flops = dense_prefill_flops(p.n_layers, p.d_model, p.d_ff, chunk)
        select_flops = _selection_flops(p, seq_len)
        k = math.ceil(p.recompute_ratio * seq_len)
        rec_flops = recompute_flops(p.n_layers, p.d_model, p.d_ff, k, seq_len)
        compute = (chunk_flops + select_flops + rec_flops / d) * p.sec_per_flop
        comm = 0.0
        if d > 1:
            comm = comm_volume_bytes(p, seq_len, "ours") * p.sec_per_byte
            comm += 2 * (d - 1) * p.link_latency_s  # gather selected rows, broadcast results
        return compute + comm

    raise ConfigurationError(f"unknown strategy {strategy!r}")


@dataclass
class SimReport:
    seq_len: int
    device_count: int
    recompute_ratio: float
    ttft_s: dict[str, float]
    speedup: dict[str, float]
    comm_bytes: dict[str, float]
    flop_breakdown: dict[str, float]


def simulate(params: CostModelParams, seq_len: int) -> SimReport:
    """Estimate all strategies at one sequence length."""
    p = params
    ttft = {s: estimate_ttft(p, seq_len, s) for s in STRATEGIES}
    base = ttft["single_prefill"]
    speedup = {s: (1.0 if s == "single_prefill" else base / ttft[s]) for s in STRATEGIES}
    comm = {s: comm_volume_bytes(p, seq_len, s) for s in STRATEGIES}
    k = math.ceil(p.recompute_ratio * seq_len)
    breakdown = {
        "projection": 8.0 * p.d_model * p.d_model * seq_len * p.n_layers,
        "attention": causal_attention_flops(p.n_layers, p.d_model, seq_len),
        "mlp": 6.0 * p.d_model * p.d_ff * seq_len * p.n_layers,
        "recompute": recompute_flops(p.n_layers, p.d_model, p.d_ff, k, seq_len),
    }
    return SimReport(
        seq_len=seq_len,
        device_count=p.device_count,
        recompute_ratio=p.recompute_ratio,
        ttft_s=ttft,
        speedup=speedup,
        comm_bytes=comm,
        flop_breakdown=breakdown,
    )


# ---------------------------------------------------------------------------
# In-process multi-worker prefill
# ---------------------------------------------------------------------------


class CacheRegistry:
    """Serialized collection point for prefilled chunks, keyed by chunk_id."""

    def __init__(self):
        self._lock = Lock()
        self._items: dict[str, object] = {}

    def insert(self, chunk_id: str, cache) -> None:
        with self._lock:
            if chunk_id in self._items:
                raise ConfigurationError(f"duplicate chunk_id {chunk_id!r} in registry")
            self._items[chunk_id] = cache

    def get(self, chunk_id: str):
        with self._lock:
            return self._items[chunk_id]

    def __len__(self):
        with self._lock:
            return len(self._items)


def run_parallel_prefill(weights, chunks: Sequence, workers: int):
    """Prefill chunks across a bounded thread pool.

    Returns (list of ChunkKV in input order, wall seconds). Results are
    independent of scheduling: each chunk's prefill is a pure function, and the
    registry serializes insertions, so any worker count yields byte-identical
    caches.
    """
    from .cache import prefill_chunk

    if workers < 1:
        raise ConfigurationError(f"workers must be >= 1, got {workers}")
    start = time.perf_counter()
    if not chunks:
        return [], time.perf_counter() - start
    registry = CacheRegistry()

    def job(chunk):
        registry.insert(chunk.chunk_id, prefill_chunk(weights, chunk))

    if workers == 1:
        for c in chunks:
            job(c)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(job, chunks))
    elapsed = time.perf_counter() - start
    return [registry.get(c.chunk_id) for c in chunks], elapsed
