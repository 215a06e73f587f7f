"""Two-stage chunk reordering for independent context segments.

Stage one scores every chunk in isolation: the chunk's own cache, chunk-local
positions, and the prompt held at its true global index (HL-TP layout), so
chunks compete on equal footing regardless of where they sit in the original
order. A chunk's importance aggregates its top first-pass token scores.

Stage two reassembles the caches with more informative chunks placed later in
the sequence (closer to the prompt, which follows the context) and reruns
attention-norm selection under the GLOBAL layout of the permuted order. Only
inputs declared order-free may be reordered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .cache import AssembledCache, ChunkKV, assemble, prefill_chunk
from .errors import ConfigurationError
from .model import Weights
from .positions import ChunkSpec, GeometryConfig, GeometryMode, assign_positions
from .selection import (
    SelectionResult,
    default_norm_layer,
    score_attention_norm,
    select_topk,
)

CHUNK_SCORE_MODES = ("sum", "mean", "max")


@dataclass
class ReorderPlan:
    original_order: list[str]
    permutation: np.ndarray  # new_order[i] = original index of the chunk now at slot i
    chunk_importance: np.ndarray  # indexed by original chunk position
    first_pass: list[SelectionResult]  # per original chunk
    second_pass: Optional[SelectionResult] = None


def _aggregate(values: np.ndarray, mode: str) -> float:
    if values.size == 0:
        return 0.0
    if mode == "sum":
        return float(values.sum())
    if mode == "mean":
        return float(values.mean())
    if mode == "max":
        return float(values.max())
    raise ConfigurationError(f"unknown chunk score mode {mode!r}; expected one of {CHUNK_SCORE_MODES}")


def score_chunks(
    weights: Weights,
    chunks: Sequence[ChunkSpec],
    prompt_token_ids: np.ndarray,
    budget: int,
    norm_layer: Optional[int] = None,
    chunk_score: str = "sum",
    prefilled: Optional[Sequence[ChunkKV]] = None,
) -> tuple[np.ndarray, list[SelectionResult]]:
    """First-pass per-chunk importance under the HL-TP layout.

    Each chunk gets a per-chunk budget of ceil(budget / K) tokens; its
    importance aggregates the selected tokens' scores with the chosen mode.
    Scoring one chunk never looks at the others, so importances are invariant
    to the input order.
    """
    if not chunks:
        raise ConfigurationError("no chunks to score")
    for c in chunks:
        if c.local_length == 0:
            raise ConfigurationError(f"chunk {c.chunk_id!r} is empty")
    if chunk_score not in CHUNK_SCORE_MODES:
        raise ConfigurationError(f"unknown chunk score mode {chunk_score!r}")
    prompt_token_ids = np.asarray(prompt_token_ids, dtype=np.int64)
    if norm_layer is None:
        norm_layer = default_norm_layer(weights.config.n_layers)
    total = sum(c.local_length for c in chunks)
    per_chunk = math.ceil(budget / len(chunks)) if budget > 0 else 0

    if prefilled is None:
        prefilled = [prefill_chunk(weights, c) for c in chunks]

    importances = np.zeros(len(chunks), dtype=np.float64)
    first_pass: list[SelectionResult] = []
    for ci, (chunk, ckv) in enumerate(zip(chunks, prefilled)):
        mini = assemble([ckv])
        geometry = GeometryConfig(
            mode=GeometryMode.HL_TP,
            prompt_length=int(prompt_token_ids.size),
            chunk_lengths=(chunk.local_length,),
            prompt_offset=total,
            max_position=weights.config.max_position,
        )
        assignment = assign_positions(geometry, [chunk])
        scores = score_attention_norm(weights, mini, prompt_token_ids, assignment, norm_layer)
        k = min(per_chunk, chunk.local_length)
        selected = select_topk(scores, k)
        first_pass.append(
            SelectionResult(
                scores=scores,
                selected=selected,
                strategy="attention-norm",
                geometry=GeometryMode.HL_TP.value,
            )
        )
        importances[ci] = _aggregate(scores[selected], chunk_score)
    return importances, first_pass


def reorder_and_reselect(
    weights: Weights,
    chunks: Sequence[ChunkSpec],
    prompt_token_ids: np.ndarray,
    budget: int,
    norm_layer: Optional[int] = None,
    chunk_score: str = "sum",
    sequential_input: bool = False,
    prefilled: Optional[Sequence[ChunkKV]] = None,
) -> tuple[ReorderPlan, AssembledCache, SelectionResult]:
    """Reorder chunks by importance and reselect under the permuted GLOBAL layout.

    The most important chunk is placed last (adjacent to the prompt); ties keep
    the input order (stable sort). Returns the plan, the cache assembled in the
    new order, and the second-pass selection in permuted global indices.
    """
    if sequential_input:
        raise ConfigurationError(
            "reorder requested on sequentially structured input; "
            "chunk reordering is only valid for independent segments"
        )
    if prefilled is None:
        prefilled = [prefill_chunk(weights, c) for c in chunks]
    importances, first_pass = score_chunks(
        weights,
        chunks,
        prompt_token_ids,
        budget,
        norm_layer=norm_layer,
        chunk_score=chunk_score,
        prefilled=prefilled,
    )
    # Ascending importance with a stable tie rule puts the most important chunk
    # nearest the prompt and preserves input order on equal scores.
    permutation = np.argsort(importances, kind="stable").astype(np.int64)

    ordered_chunks = [chunks[i] for i in permutation]
    ordered_kvs = [prefilled[i] for i in permutation]
    cache = assemble(ordered_kvs)

    prompt_token_ids = np.asarray(prompt_token_ids, dtype=np.int64)
    geometry = GeometryConfig(
        mode=GeometryMode.GLOBAL,
        prompt_length=int(prompt_token_ids.size),
        chunk_lengths=tuple(c.local_length for c in ordered_chunks),
        max_position=weights.config.max_position,
    )
    assignment = assign_positions(geometry, ordered_chunks)
    if norm_layer is None:
        norm_layer = default_norm_layer(weights.config.n_layers)
    scores = score_attention_norm(weights, cache, prompt_token_ids, assignment, norm_layer)
    selected = select_topk(scores, min(budget, cache.context_length))
    second = SelectionResult(
        scores=scores,
        selected=selected,
        strategy="attention-norm",
        geometry=GeometryMode.GLOBAL.value,
    )
    plan = ReorderPlan(
        original_order=[c.chunk_id for c in chunks],
        permutation=permutation,
        chunk_importance=importances,
        first_pass=first_pass,
        second_pass=second,
    )
    return plan, cache, second
