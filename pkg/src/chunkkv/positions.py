"""RoPE position assignment for chunked contexts, plus position-space similarity.

A chunked context is prefilled with chunk-local positions (each chunk indexed
from 0). At query time the chunks and the prompt are laid out under one of four
geometry configurations, which differ in where the context keys are considered
to sit and where the prompt is placed:

  GLOBAL  context chunks at their absolute offsets in the concatenated
          sequence, prompt immediately after the context.
  HL-HP   chunks kept at their chunk-local (head) positions, overlapping
          across chunks; prompt immediately after the longest chunk's range.
  HL-TP   chunks kept chunk-local; prompt at its global index.
  TL-TP   prompt at its global index; chunks packed contiguously so the
          context ends exactly one position before the prompt.

Because rotary attention depends only on position differences, TL-TP with the
default prompt offset is exactly GLOBAL, and any TL-TP layout is a uniform
shift of GLOBAL; both facts are covered by tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError


class GeometryMode(Enum):
    GLOBAL = "GLOBAL"
    HL_HP = "HL-HP"
    HL_TP = "HL-TP"
    TL_TP = "TL-TP"

    @classmethod
    def parse(cls, name: str) -> "GeometryMode":
        """Accepts mode names case-insensitively, with '-' or '_' separators."""
        key = str(name).strip().upper().replace("_", "-")
        for mode in cls:
            if mode.value == key:
                return mode
        raise ConfigurationError(
            f"unknown geometry mode {name!r}; expected one of "
            + ", ".join(m.value for m in cls)
        )


@dataclass
class ChunkSpec:
    """A context chunk: id, token ids, and its index in the declared order."""

    chunk_id: str
    token_ids: np.ndarray
    declared_order_index: int = 0
    local_length: int = field(init=False)

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        if self.token_ids.ndim != 1:
            raise ConfigurationError(f"chunk {self.chunk_id!r} token_ids must be 1-D")
        self.local_length = int(self.token_ids.size)


@dataclass
class GeometryConfig:
    """One positional layout for (chunked context, prompt).

    prompt_offset is the prompt's original global index; it defaults to the sum
    of the chunk lengths (the natural index when the chunks are the whole
    context). TL-TP uses it as the pack boundary; HL-TP uses it as the prompt
    start. GLOBAL and HL-HP ignore it, their prompt starts are fixed by the
    chunk lengths.
    """

    mode: GeometryMode
    prompt_length: int
    chunk_lengths: tuple[int, ...]
    prompt_offset: Optional[int] = None
    max_position: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = GeometryMode.parse(self.mode)
        self.chunk_lengths = tuple(int(n) for n in self.chunk_lengths)
        if any(n < 1 for n in self.chunk_lengths):
            raise ConfigurationError("chunk lengths must all be >= 1")
        if self.prompt_length < 0:
            raise ConfigurationError("prompt_length must be >= 0")
        if self.prompt_offset is not None and self.prompt_offset < 0:
            raise ConfigurationError("prompt_offset must be >= 0")

    @property
    def context_length(self) -> int:
        return sum(self.chunk_lengths)


@dataclass
class PositionAssignment:
    context_positions: list[np.ndarray]  # per chunk, consecutive increasing
    prompt_positions: np.ndarray

    def context_concat(self) -> np.ndarray:
        if not self.context_positions:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.context_positions)


def assign_positions(
    config: GeometryConfig, chunks: Sequence[ChunkSpec]
) -> PositionAssignment:
    """Assign RoPE position indices to every context and prompt token.

    Raises ConfigurationError when chunk lengths disagree with the config, when
    a TL-TP pack would start below zero, or when any position reaches
    config.max_position.
    """
    lengths = config.chunk_lengths
    if len(chunks) != len(lengths):
        raise ConfigurationError(
            f"{len(chunks)} chunks supplied for {len(lengths)} declared lengths"
        )
    for c, n in zip(chunks, lengths):
        if c.local_length != n:
            raise ConfigurationError(
                f"chunk {c.chunk_id!r} has length {c.local_length}, declared {n}"
            )

    total = sum(lengths)
    natural_prompt = total if config.prompt_offset is None else int(config.prompt_offset)

    if config.mode is GeometryMode.GLOBAL:
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]) if lengths else np.zeros(0)
        prompt_start = total
    elif config.mode is GeometryMode.HL_HP:
        starts = np.zeros(len(lengths))
        prompt_start = max(lengths) if lengths else 0
    elif config.mode is GeometryMode.HL_TP:
        starts = np.zeros(len(lengths))
        prompt_start = natural_prompt
    elif config.mode is GeometryMode.TL_TP:
        prompt_start = natural_prompt
        suffix = np.cumsum(lengths[::-1])[::-1] if lengths else np.zeros(0)
        starts = prompt_start - suffix
        if len(starts) and starts[0] < 0:
            raise ConfigurationError(
                f"TL-TP pack underflows: prompt offset {prompt_start} is smaller "
                f"than the total context length {total}"
            )
    else:  # pragma: no cover
        raise ConfigurationError(f"unhandled mode {config.mode}")

    context_positions = [
        (int(s) + np.arange(n, dtype=np.int64)) for s, n in zip(starts, lengths)
    ]
    prompt_positions = int(prompt_start) + np.arange(config.prompt_length, dtype=np.int64)

    if config.max_position is not None:
        top = max(
            [int(p[-1]) for p in context_positions if p.size] + ([int(prompt_positions[-1])] if prompt_positions.size else [0])
        )
        if top >= config.max_position:
            raise ConfigurationError(
                f"assigned position {top} overflows max_position {config.max_position}"
            )
    return PositionAssignment(context_positions=context_positions, prompt_positions=prompt_positions)


# ---------------------------------------------------------------------------
# Position-space similarity (no token semantics involved)
# ---------------------------------------------------------------------------


def rope_position_vector(position: float, d: int, base: float = 10000.0) -> np.ndarray:
    """The image of the reference all-pairs unit direction under rotation to a position.

    Returns [cos(theta_0 p), sin(theta_0 p), ..., cos(theta_{d/2-1} p),
    sin(theta_{d/2-1} p)], which is apply_rope([1,0,1,0,...], p). Cosine
    similarity of two such vectors depends only on the position difference.
    """
    if d % 2 != 0 or d < 2:
        raise ConfigurationError(f"RoPE dimension must be a positive even number, got {d}")
    i = np.arange(d // 2, dtype=np.float64)
    theta = np.power(float(base), -2.0 * i / d)
    ang = theta * float(position)
    out = np.empty(d, dtype=np.float64)
    out[0::2] = np.cos(ang)
    out[1::2] = np.sin(ang)
    return out


@dataclass(frozen=True)
class RopeSimilarity:
    mom: float  # mean over prompt positions of max similarity to a selected position
    max: float  # global max over all (prompt, selected) pairs


def rope_similarity_stats(
    prompt_positions: Sequence[int],
    selected_positions: Sequence[int],
    d: int,
    base: float = 10000.0,
) -> RopeSimilarity:
    """Mean-of-Max and Max cosine similarity between position embeddings."""
    pp = np.asarray(prompt_positions, dtype=np.float64).ravel()
    sp = np.asarray(selected_positions, dtype=np.float64).ravel()
    if pp.size == 0:
        raise ConfigurationError("prompt position set is empty")
    if sp.size == 0:
        raise ConfigurationError("selected position set is empty")
    pv = np.stack([rope_position_vector(p, d, base) for p in pp])
    sv = np.stack([rope_position_vector(p, d, base) for p in sp])
    pn = np.linalg.norm(pv, axis=1, keepdims=True)
    sn = np.linalg.norm(sv, axis=1, keepdims=True)
    cos = (pv / pn) @ (sv / sn).T
    row_max = cos.max(axis=1)
    return RopeSimilarity(mom=float(row_max.mean()), max=float(cos.max()))
