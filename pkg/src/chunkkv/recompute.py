"""Selective KV recomputation under the global causal mask.

Selected context tokens restart from their token embeddings and advance through
every layer. At each layer they attend, as queries rotated to their global
positions, to the layer's current cache keys: non-selected rows re-rotated to
the global layout, selected rows replaced by the fresh same-layer keys. Keys of
a selected token are visible to later selected tokens, which is what makes a
full-budget recomputation reproduce full-context prefilling; processing is
equivalent to handling selected tokens in ascending global order.

The resulting K/V rows replace their cache rows with RECOMPUTED_GLOBAL
provenance; everything else is untouched.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cache import AssembledCache, replace_entries
from .costmodel import CostModelParams, recompute_flops
from .errors import ConfigurationError
from .model import Weights, masked_attention, mlp_block, rms_norm, rotate_heads


@dataclass
class RecomputePlan:
    """Which context rows to recompute, where they sit, and what they may see.

    selected must be ascending; positions are the rows' global RoPE positions
    (defaults to the row indices, i.e. the decode layout); allowed_upto[i] is
    the last permitted key index for selected[i] (causal: its own index).
    Recomputation always spans all layers.
    """

    selected: np.ndarray
    positions: np.ndarray
    allowed_upto: np.ndarray

    def __post_init__(self):
        self.selected = np.asarray(self.selected, dtype=np.int64).ravel()
        self.positions = np.asarray(self.positions, dtype=np.int64).ravel()
        self.allowed_upto = np.asarray(self.allowed_upto, dtype=np.int64).ravel()
        if self.positions.shape != self.selected.shape or self.allowed_upto.shape != self.selected.shape:
            raise ConfigurationError("plan arrays must have equal lengths")
        if self.selected.size and np.any(np.diff(self.selected) <= 0):
            raise ConfigurationError("selected indices must be strictly ascending")
        if np.any(self.allowed_upto < self.selected):
            raise ConfigurationError("allowed-key horizon must be causal (>= own index)")


def make_plan(cache: AssembledCache, selected: np.ndarray) -> RecomputePlan:
    """Standard plan: global positions equal to row indices, causal horizons."""
    sel = np.sort(np.asarray(selected, dtype=np.int64).ravel())
    n = cache.context_length
    if sel.size and (sel.min() < 0 or sel.max() >= n):
        raise ConfigurationError(f"selected index outside context [0, {n})")
    if np.unique(sel).size != sel.size:
        raise ConfigurationError("selected indices contain duplicates")
    return RecomputePlan(selected=sel, positions=sel.copy(), allowed_upto=sel.copy())


def recompute_selected(
    weights: Weights, cache: AssembledCache, plan: RecomputePlan
) -> AssembledCache:
    """Recompute the planned rows and return the cache with them replaced."""
    cfg = weights.config
    n = cache.context_length
    sel = plan.selected
    if sel.size == 0:
        return cache
    if sel.max() >= n or sel.min() < 0:
        raise ConfigurationError(f"plan index outside cache context [0, {n})")
    if cache.n_layers != cfg.n_layers:
        raise ConfigurationError("cache layer count does not match model")
    if np.any(plan.allowed_upto >= n):
        raise ConfigurationError("allowed-key horizon outside cache context")

    dt = weights.dtype
    s = sel.size
    token_ids = cache.token_ids[sel]
    global_pos = plan.positions

    # Non-selected rows participate at their global-layout rotations.
    base_target = np.arange(n, dtype=np.int64)
    base_deltas = base_target - cache.row_positions[:n]

    key_index = np.arange(n, dtype=np.int64)
    allowed = key_index[None, :] <= plan.allowed_upto[:, None]  # (S, N)

    h = weights.embedding[token_ids].astype(dt, copy=True)
    new_keys, new_values = [], []
    for lw in weights.layers:
        x = rms_norm(h, lw.attn_norm)
        q = (x @ lw.wq).reshape(s, cfg.n_heads, cfg.d_head)
        k = (x @ lw.wk).reshape(s, cfg.n_heads, cfg.d_head)
        v = (x @ lw.wv).reshape(s, cfg.n_heads, cfg.d_head)
        q = rotate_heads(q, global_pos, cfg.rope_base)
        k = rotate_heads(k, global_pos, cfg.rope_base)

        layer_idx = len(new_keys)
        keys = cache.keys[layer_idx][:n].copy()
        need = base_deltas != 0
        if np.any(need):
            keys[need] = rotate_heads(keys[need], base_deltas[need], cfg.rope_base)
        keys[sel] = k
        values = cache.values[layer_idx][:n].copy()
        values[sel] = v

        ctx, _ = masked_attention(q, keys, values, allowed)
        h = h + ctx.reshape(s, cfg.d_model) @ lw.wo
        h = h + mlp_block(rms_norm(h, lw.mlp_norm), lw)
        new_keys.append(k)
        new_values.append(v)

    return replace_entries(
        cache, sel, list(zip(new_keys, new_values)), positions=global_pos
    )


# ---------------------------------------------------------------------------
# Overhead accounting
# ---------------------------------------------------------------------------


@dataclass
class OverheadReport:
    """Measured cost of a recomputation pass against its analytic ideal.

    overhead_factor = measured median wall time / (ideal_flops * sec_per_flop).
    When params are not supplied, sec_per_flop is calibrated from a dense
    full-prefill timing over the same context, so the factor reads as
    "recompute inefficiency relative to dense prefill throughput". A plan with
    zero selected tokens is degenerate: ideal_flops is 0 and the factor is
    reported as inf.
    """

    ideal_flops: float
    measured_time_s: float
    predicted_time_s: float
    overhead_factor: float
    degenerate: bool
    repetitions: int
    calibration: str


def measure_overhead(
    weights: Weights,
    cache: AssembledCache,
    plan: RecomputePlan,
    repetitions: int,
    params: Optional[CostModelParams] = None,
) -> OverheadReport:
    if repetitions < 3:
        raise ConfigurationError(f"repetitions must be >= 3, got {repetitions}")
    cfg = weights.config
    n = cache.context_length
    k = int(plan.selected.size)
    ideal = recompute_flops(
        n_layers=cfg.n_layers,
        d_model=cfg.d_model,
        d_ff=cfg.d_ff,
        n_tokens=k,
        n_keys=n,
    )

    if params is not None:
        sec_per_flop = params.sec_per_flop
        calibration = "params"
    else:
        # Calibrate against a dense prefill of the same context on this host.
        from .cache import full_prefill
        from .costmodel import dense_prefill_flops

        t0 = time.perf_counter()
        full_prefill(weights, cache.token_ids[:n])
        dense_time = time.perf_counter() - t0
        dense = dense_prefill_flops(
            n_layers=cfg.n_layers, d_model=cfg.d_model, d_ff=cfg.d_ff, n_tokens=n
        )
        sec_per_flop = dense_time / dense
        calibration = "dense-prefill"

    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        recompute_selected(weights, cache, plan)
        times.append(time.perf_counter() - t0)
    measured = statistics.median(times)

    if k == 0:
        return OverheadReport(
            ideal_flops=0.0,
            measured_time_s=measured,
            predicted_time_s=0.0,
            overhead_factor=float("inf"),
            degenerate=True,
            repetitions=repetitions,
            calibration=calibration,
        )
    predicted = ideal * sec_per_flop
    return OverheadReport(
        ideal_flops=float(ideal),
        measured_time_s=measured,
        predicted_time_s=predicted,
        overhead_factor=measured / predicted,
        degenerate=False,
        repetitions=repetitions,
        calibration=calibration,
    )
