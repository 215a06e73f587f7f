"""Recomputation-target selection: attention-norm scoring plus baselines.

The attention-norm strategy runs the prompt forward over the assembled (still
stale) cache, with context keys re-rotated to the positions the chosen geometry
assigns them, captures the prompt-to-key attention matrix at one layer,
averages it over heads, restricts it to context columns, and scores each
context token by the attention mass it receives from all prompt rows. The
top-k scored tokens are the recomputation targets.

Baselines: a CacheBlend-style selector scoring tokens by the hidden-state
deviation between chunk-local and full-context runs over a few early layers; an
EPIC-style selector taking fixed chunk-initial tokens; and a uniform random
control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np

from .cache import AssembledCache
from .errors import ConfigurationError
from .model import ForwardRequest, Weights, forward, rotate_heads
from .positions import ChunkSpec, GeometryConfig, GeometryMode, PositionAssignment, assign_positions


class Strategy(Enum):
    ATTENTION_NORM = "attention-norm"
    CACHEBLEND = "cacheblend"
    EPIC = "epic"
    RANDOM = "random"

    @classmethod
    def parse(cls, name: str) -> "Strategy":
        key = str(name).strip().lower().replace("_", "-")
        for s in cls:
            if s.value == key:
                return s
        raise ConfigurationError(
            f"unknown strategy {name!r}; expected one of " + ", ".join(s.value for s in cls)
        )


def default_norm_layer(n_layers: int) -> int:
    """Intermediate-to-late capture layer, expressed scale-independently."""
    return min(n_layers - 1, int(math.floor(0.6 * n_layers)))


@dataclass
class SelectionConfig:
    """How to pick recomputation targets.

    Exactly one of topk / ratio must be set; ratio budgets resolve to
    ceil(ratio * N) globally (EPIC applies its ratio per chunk instead).
    norm_layer defaults to floor(0.6 * n_layers).
    """

    strategy: Strategy = Strategy.ATTENTION_NORM
    topk: Optional[int] = None
    ratio: Optional[float] = None
    norm_layer: Optional[int] = None
    geometry: Union[GeometryConfig, GeometryMode, str, None] = None
    seed: int = 0
    cacheblend_layers: int = 2
    head_aggregation: str = "mean_over_heads"

    def __post_init__(self):
        if isinstance(self.strategy, str):
            self.strategy = Strategy.parse(self.strategy)
        if (self.topk is None) == (self.ratio is None):
            raise ConfigurationError("exactly one of topk or ratio must be set")
        if self.ratio is not None and not 0.0 <= self.ratio <= 1.0:
            raise ConfigurationError(f"ratio must be in [0, 1], got {self.ratio}")
        if self.topk is not None and self.topk < 0:
            raise ConfigurationError(f"topk must be >= 0, got {self.topk}")
        if self.head_aggregation != "mean_over_heads":
            raise ConfigurationError(f"unsupported head aggregation {self.head_aggregation!r}")

    def resolve_budget(self, n_context: int) -> int:
        k = self.topk if self.topk is not None else math.ceil(self.ratio * n_context)
        if k > n_context:
            raise ConfigurationError(f"budget {k} exceeds context length {n_context}")
        return int(k)


@dataclass
class SelectionResult:
    scores: np.ndarray  # (N,)
    selected: np.ndarray  # sorted ascending, len k
    strategy: str
    geometry: Optional[str] = None
    budget: int = 0

    def __post_init__(self):
        self.selected = np.asarray(self.selected, dtype=np.int64)
        self.budget = int(self.selected.size)


# ---------------------------------------------------------------------------
# Attention-norm scoring
# ---------------------------------------------------------------------------


def score_from_attention(attention: np.ndarray, n_context: int) -> np.ndarray:
    """Column sums of prompt-to-context attention.

    attention is (H, M, S) or (M, S) post-softmax weights over S keys of which
    the first n_context are context columns. Head-aggregated by mean, then each
    context column is summed over prompt rows.
    """
    a = np.asarray(attention, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=0)
    if a.ndim != 2:
        raise ConfigurationError(f"attention must be 2-D or 3-D, got shape {a.shape}")
    if n_context > a.shape[1]:
        raise ConfigurationError(
            f"n_context {n_context} exceeds key count {a.shape[1]}"
        )
    return a[:, :n_context].sum(axis=0)


def score_attention_norm(
    weights: Weights,
    cache: AssembledCache,
    prompt_token_ids: np.ndarray,
    positions: PositionAssignment,
    norm_layer: int,
) -> np.ndarray:
    """Prompt-conditioned importance scores for every context token.

    The cached context keys are re-rotated from their stored prefill positions
    to the geometry's positions (exact, by rotation delta), the prompt runs
    forward on top of them at its assigned positions, and attention at
    norm_layer is captured. The captured rows are softmax distributions over
    all keys; only the context columns are summed, so the total score mass is
    at most the prompt length.
    """
    cfg = weights.config
    if not 0 <= norm_layer < cfg.n_layers:
        raise ConfigurationError(f"norm_layer {norm_layer} outside [0, {cfg.n_layers})")
    n = cache.context_length
    sel_pos = positions.context_concat()
    if sel_pos.size != n:
        raise ConfigurationError(
            f"position assignment covers {sel_pos.size} context tokens, cache has {n}"
        )
    deltas = sel_pos - cache.row_positions[:n]
    injected = []
    for li in range(cache.n_layers):
        k = cache.keys[li][:n]
        if np.any(deltas != 0):
            k = rotate_heads(k, deltas, cfg.rope_base)
        injected.append((k, cache.values[li][:n]))
    result = forward(
        weights,
        ForwardRequest(
            token_ids=np.asarray(prompt_token_ids, dtype=np.int64),
            positions=positions.prompt_positions,
            mask="causal",
            injected_kv=injected,
            capture=frozenset({norm_layer}),
        ),
    )
    return score_from_attention(result.attention[norm_layer], n)


def select_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties broken by lower index first, sorted."""
    scores = np.asarray(scores)
    n = scores.size
    if k > n:
        raise ConfigurationError(f"k ({k}) exceeds score count ({n})")
    if k < 0:
        raise ConfigurationError(f"k must be >= 0, got {k}")
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")  # descending score, ascending index on ties
    return np.sort(order[:k]).astype(np.int64)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def score_cacheblend(
    weights: Weights, chunks: Sequence[ChunkSpec], early_layers: int
) -> np.ndarray:
    """Hidden-state deviation between chunk-local and full-context runs.

    Each token's score is the Euclidean distance between its block outputs in
    the two runs, summed over the first early_layers layers. A single chunk
    starting at global position 0 scores identically zero everywhere.
    """
    cfg = weights.config
    if early_layers < 1:
        raise ConfigurationError("early_layers must be >= 1")
    if early_layers > cfg.n_layers:
        raise ConfigurationError(
            f"early_layers {early_layers} exceeds n_layers {cfg.n_layers}"
        )
    if not chunks:
        raise ConfigurationError("no chunks to score")
    full_tokens = np.concatenate([c.token_ids for c in chunks])
    n = full_tokens.size

    local_hidden = [[] for _ in range(early_layers)]
    for c in chunks:
        res = forward(
            weights,
            ForwardRequest(
                token_ids=c.token_ids,
                positions=np.arange(c.local_length),
                mask="causal",
            ),
        )
        for li in range(early_layers):
            local_hidden[li].append(res.hidden_states[li])
    full = forward(
        weights,
        ForwardRequest(token_ids=full_tokens, positions=np.arange(n), mask="causal"),
    )
    scores = np.zeros(n, dtype=np.float64)
    for li in range(early_layers):
        local = np.concatenate(local_hidden[li], axis=0)
        scores += np.linalg.norm(local - full.hidden_states[li], axis=1)
    return scores


def select_epic(chunk_lengths: Sequence[int], ratio: float) -> np.ndarray:
    """Chunk-initial tokens: the first ceil(ratio * len) of every chunk."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigurationError(f"ratio must be in [0, 1], got {ratio}")
    out = []
    start = 0
    for length in chunk_lengths:
        take = math.ceil(ratio * length)
        out.append(start + np.arange(take, dtype=np.int64))
        start += length
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def select_random(n: int, k: int, seed: int) -> np.ndarray:
    """Uniform sample of k context indices without replacement, deterministic per seed."""
    if k > n:
        raise ConfigurationError(f"k ({k}) exceeds context length ({n})")
    if k < 0:
        raise ConfigurationError(f"k must be >= 0, got {k}")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=k, replace=False).astype(np.int64))


# ---------------------------------------------------------------------------
# Strategy dispatch
# ---------------------------------------------------------------------------


def run_selection(
    weights: Weights,
    chunks: Sequence[ChunkSpec],
    cache: AssembledCache,
    prompt_token_ids: np.ndarray,
    config: SelectionConfig,
) -> SelectionResult:
    """Produce a SelectionResult for any strategy over an assembled cache."""
    n = cache.context_length
    prompt_token_ids = np.asarray(prompt_token_ids, dtype=np.int64)

    if config.strategy is Strategy.ATTENTION_NORM:
        geometry = config.geometry
        if geometry is None:
            geometry = GeometryMode.GLOBAL
        if not isinstance(geometry, GeometryConfig):
            # A bare mode resolves against the actual chunk layout.
            geometry = GeometryConfig(
                mode=GeometryMode.parse(geometry) if isinstance(geometry, str) else geometry,
                prompt_length=int(prompt_token_ids.size),
                chunk_lengths=tuple(cache.chunk_lengths),
                max_position=weights.config.max_position,
            )
        assignment = assign_positions(geometry, chunks)
        norm_layer = (
            config.norm_layer
            if config.norm_layer is not None
            else default_norm_layer(weights.config.n_layers)
        )
        scores = score_attention_norm(weights, cache, prompt_token_ids, assignment, norm_layer)
        k = config.resolve_budget(n)
        selected = select_topk(scores, k)
        return SelectionResult(
            scores=scores,
            selected=selected,
            strategy=config.strategy.value,
            geometry=geometry.mode.value,
        )

    if config.strategy is Strategy.CACHEBLEND:
        scores = score_cacheblend(weights, chunks, config.cacheblend_layers)
        k = config.resolve_budget(n)
        selected = select_topk(scores, k)
        return SelectionResult(scores=scores, selected=selected, strategy=config.strategy.value)

    if config.strategy is Strategy.EPIC:
        ratio = config.ratio if config.ratio is not None else config.topk / max(n, 1)
        selected = select_epic(cache.chunk_lengths, ratio)
        scores = np.zeros(n, dtype=np.float64)
        scores[selected] = 1.0
        return SelectionResult(scores=scores, selected=selected, strategy=config.strategy.value)

    if config.strategy is Strategy.RANDOM:
        k = config.resolve_budget(n)
        selected = select_random(n, k, config.seed)
        scores = np.zeros(n, dtype=np.float64)
        scores[selected] = 1.0
        return SelectionResult(scores=scores, selected=selected, strategy=config.strategy.value)

    raise ConfigurationError(f"unhandled strategy {config.strategy}")  # pragma: no cover
