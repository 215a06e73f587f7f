"""Synthetic tasks, the end-to-end pipeline, sweeps, and run records.

Random weights make QA accuracy meaningless, so the harness measures the
mechanisms directly instead:

  cache fidelity    distance between the post-recompute cache and a
                    full-context prefill of the same layout;
  logit fidelity    worst-case difference of the first generated position's
                    logits against the full-prefill run;
  needle hit        whether the planted needle token landed in the selected
                    set, under the planted-needle model configuration
                    (identity query/key projections at the capture layer, so
                    the one context token sharing a prompt token's id is the
                    analytically maximal attention target);
  RoPE similarity   MoM / Max position-embedding similarity of the selected
                    set to the prompt.

Every run serializes to a line-delimited JSON record that fully reconstructs
it; replaying a record reproduces the deterministic metrics exactly.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from threading import Lock
from typing import Optional, Sequence, Union

import numpy as np

from .cache import (
    AssembledCache,
    cache_fidelity,
    decode_view,
    full_prefill,
    prefill_chunk,
)
from .errors import ConfigurationError
from .model import (
    ForwardRequest,
    ModelConfig,
    Weights,
    forward,
    init_weights,
)
from .positions import (
    ChunkSpec,
    GeometryConfig,
    GeometryMode,
    rope_similarity_stats,
)
from .recompute import make_plan, recompute_selected
from .reorder import reorder_and_reselect
from .selection import (
    SelectionConfig,
    SelectionResult,
    Strategy,
    default_norm_layer,
    run_selection,
)
from .util import hash64, hash64_arrays

RECORD_SCHEMA_VERSION = 1

# Calibrated defaults for the planted-needle construction; see tests and README.
DEFAULT_NEEDLE_GAIN = 1.0
DEFAULT_NEEDLE_BOOST = 2.0
DEFAULT_NEEDLE_CARRIER = 2.0

# Vocabulary split for synthetic tasks: noise tokens never collide with the
# reserved band that needle and prompt filler ids are drawn from.
_RESERVED_BAND = 64
_FIRST_NOISE_ID = 2


def acceptance_needle_task() -> "SyntheticTask":
    """The frozen needle task used by the acceptance sweeps.

    Passage-split context of 256 tokens with passage lengths 128/64/40/24 and
    the needle planted in the final short passage. The large first passage is
    position-exact after chunk prefilling (zero staleness), so selections that
    ignore the decode-time layout waste budget there, while the short tail
    passage holds the needle inside the prompt's high-similarity position band
    only under the GLOBAL layout.
    """
    return SyntheticTask(
        kind="needle",
        total_length=256,
        boundaries=(128, 192, 232),
        fixed_size=None,
        depth_range=(0.915, 0.995),
        prompt_length=16,
    )


def toy_config(
    n_layers: int = 4,
    n_heads: int = 4,
    d_head: int = 16,
    d_ff: int = 256,
    vocab_size: int = 256,
    max_position: int = 16384,
    rope_base: float = 10000.0,
) -> ModelConfig:
    """Default desk-scale model dimensions."""
    return ModelConfig(
        n_layers=n_layers,
        n_heads=n_heads,
        d_model=n_heads * d_head,
        d_head=d_head,
        d_ff=d_ff,
        vocab_size=vocab_size,
        rope_base=rope_base,
        max_position=max_position,
    )


def needle_qk_weights(
    weights: Weights,
    layer: int,
    gain: float,
    band_boost: float = 1.0,
    carrier: float = 0.0,
) -> Weights:
    """Planted-needle model configuration.

    Replaces the capture layer's query and key projections with gain-scaled
    identities, so attention logits at that layer are (scaled) rotated inner
    products of the raw hidden states and the needle token is the analytically
    predictable maximum for its matching prompt token.

    band_boost scales the embedding rows of the reserved token band (where
    needle and prompt ids live), raising the same-token signal above
    residual-stream noise. carrier adds a shared direction of that norm to
    every embedding row; trained transformers have strongly anisotropic hidden
    states, and the shared component is what makes attention logits carry a
    positional-proximity prior, so the toy needs it planted explicitly.
    """
    if not 0 <= layer < weights.config.n_layers:
        raise ConfigurationError(f"layer {layer} outside [0, {weights.config.n_layers})")
    eye = np.eye(weights.config.d_model, dtype=weights.dtype) * gain
    layers = list(weights.layers)
    lw = dataclasses.replace(layers[layer], wq=eye.copy(), wk=eye.copy())
    layers[layer] = lw
    embedding = weights.embedding
    if band_boost != 1.0 or carrier != 0.0:
        embedding = embedding.copy()
        if band_boost != 1.0:
            embedding[weights.config.vocab_size - _RESERVED_BAND :] *= band_boost
        if carrier != 0.0:
            d = weights.config.d_model
            embedding += carrier / np.sqrt(d) * np.ones(d, dtype=embedding.dtype)
    return Weights(
        config=weights.config,
        embedding=embedding,
        layers=layers,
        final_norm=weights.final_norm,
        out_head=weights.out_head,
    )


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------


@dataclass
class SyntheticTask:
    """A generated context: noise tokens, optionally one planted needle.

    needle_depth is the needle's depth fraction in [0, 1); None draws it
    uniformly from the task seed. Chunking is either fixed_size (chunks of s
    tokens, last one shorter) or passage boundaries (sorted interior split
    offsets).
    """

    kind: str = "needle"  # "needle" | "uniform_noise"
    total_length: int = 256
    needle_depth: Optional[float] = None
    depth_range: tuple[float, float] = (0.0, 1.0)
    fixed_size: Optional[int] = 64
    boundaries: Optional[tuple[int, ...]] = None
    prompt_length: int = 8
    prompt_needle_copies: int = 1
    vocab_size: int = 256

    def __post_init__(self):
        if self.kind not in ("needle", "uniform_noise"):
            raise ConfigurationError(f"unknown task kind {self.kind!r}")
        if self.total_length < 1:
            raise ConfigurationError("total_length must be >= 1")
        if self.prompt_length < 1:
            raise ConfigurationError("prompt_length must be >= 1")
        if (self.fixed_size is None) == (self.boundaries is None):
            raise ConfigurationError("exactly one of fixed_size or boundaries must be set")
        if self.fixed_size is not None and self.fixed_size < 1:
            raise ConfigurationError("fixed_size must be >= 1")
        if self.vocab_size < _RESERVED_BAND + _FIRST_NOISE_ID + 1:
            raise ConfigurationError(f"vocab_size too small, need > {_RESERVED_BAND + _FIRST_NOISE_ID}")
        if self.needle_depth is not None and not 0.0 <= self.needle_depth:
            raise ConfigurationError("needle_depth must be >= 0")
        self.depth_range = (float(self.depth_range[0]), float(self.depth_range[1]))
        lo, hi = self.depth_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigurationError(f"depth_range must satisfy 0 <= lo <= hi <= 1, got {self.depth_range}")
        if not 1 <= self.prompt_needle_copies <= self.prompt_length:
            raise ConfigurationError("prompt_needle_copies must be in [1, prompt_length]")


@dataclass
class GeneratedTask:
    chunks: list[ChunkSpec]
    prompt_token_ids: np.ndarray
    needle_index: Optional[int]  # global context index in the declared chunk order
    needle_token: Optional[int]
    task: SyntheticTask
    seed: int

    def chunk_lengths(self) -> tuple[int, ...]:
        return tuple(c.local_length for c in self.chunks)


def _chunk_lengths_for(task: SyntheticTask) -> list[int]:
    n = task.total_length
    if task.fixed_size is not None:
        s = task.fixed_size
        lens = [s] * (n // s)
        if n % s:
            lens.append(n % s)
        return lens
    bounds = sorted(int(b) for b in task.boundaries)
    if any(b <= 0 or b >= n for b in bounds) or len(set(bounds)) != len(bounds):
        raise ConfigurationError("passage boundaries must be distinct interior offsets")
    edges = [0] + bounds + [n]
    return [b - a for a, b in zip(edges, edges[1:])]


def generate_task(task: SyntheticTask, seed: int) -> GeneratedTask:
    """Deterministically build (chunks, prompt, needle index) from a task spec."""
    rng = np.random.default_rng(seed)
    noise_hi = task.vocab_size - _RESERVED_BAND
    tokens = rng.integers(_FIRST_NOISE_ID, noise_hi, size=task.total_length, dtype=np.int64)

    reserved = np.arange(noise_hi, task.vocab_size, dtype=np.int64)
    reserved = rng.permutation(reserved)
    needle_index = None
    needle_token = None
    if task.kind == "needle":
        needle_token = int(reserved[0])
        if task.needle_depth is not None:
            depth = task.needle_depth
        else:
            depth = float(rng.uniform(task.depth_range[0], task.depth_range[1]))
        needle_index = int(math.floor(depth * task.total_length))
        if needle_index >= task.total_length:
            raise ConfigurationError(
                f"needle depth {depth} places the needle at {needle_index}, "
                f"beyond total length {task.total_length}"
            )
        tokens[needle_index] = needle_token
        copies = task.prompt_needle_copies
        fillers = reserved[1 : task.prompt_length - copies + 1]
        prompt = np.concatenate([[needle_token] * copies, fillers]).astype(np.int64)
        if prompt.size < task.prompt_length:
            raise ConfigurationError("prompt_length exceeds the reserved token band")
    else:
        prompt = reserved[: task.prompt_length].astype(np.int64)
        if prompt.size < task.prompt_length:
            raise ConfigurationError("prompt_length exceeds the reserved token band")

    chunks = []
    start = 0
    for ci, length in enumerate(_chunk_lengths_for(task)):
        chunks.append(
            ChunkSpec(
                chunk_id=f"c{ci}",
                token_ids=tokens[start : start + length],
                declared_order_index=ci,
            )
        )
        start += length
    return GeneratedTask(
        chunks=chunks,
        prompt_token_ids=prompt,
        needle_index=needle_index,
        needle_token=needle_token,
        task=task,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    schema_version: int
    created_at: str
    model: dict
    task: dict
    selection: dict
    reorder: bool
    chunk_score: str
    needle_gain: float
    needle_boost: float
    needle_carrier: float
    metrics: dict
    hashes: dict

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        obj = json.loads(line)
        if obj.get("schema_version") != RECORD_SCHEMA_VERSION:
            raise ConfigurationError(
                f"record schema version {obj.get('schema_version')} unsupported"
            )
        return cls(**obj)

    def deterministic_metrics(self) -> dict:
        """Metrics that replaying the record must reproduce exactly (no wall times)."""
        return {k: v for k, v in self.metrics.items() if k != "ttft_s"}


class RecordWriter:
    """Append-only JSONL writer; a single lock serializes appends."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: RunRecord) -> None:
        line = record.to_json()
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


def read_records(path) -> list[RunRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(RunRecord.from_json(line))
    return out


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def _model_dict(config: ModelConfig, seed: int, precision: str) -> dict:
    d = dataclasses.asdict(config)
    d["seed"] = seed
    d["precision"] = precision
    return d


def _selection_dict(sel: SelectionConfig, geometry_mode: Optional[str]) -> dict:
    return {
        "strategy": sel.strategy.value,
        "topk": sel.topk,
        "ratio": sel.ratio,
        "norm_layer": sel.norm_layer,
        "geometry": geometry_mode,
        "geometry_prompt_offset": None
        if not isinstance(sel.geometry, GeometryConfig)
        else sel.geometry.prompt_offset,
        "seed": sel.seed,
        "cacheblend_layers": sel.cacheblend_layers,
    }


def build_pipeline_weights(
    config: ModelConfig,
    model_seed: int,
    task: SyntheticTask,
    selection: SelectionConfig,
    needle_gain: float,
    needle_boost: float,
    needle_carrier: float,
    precision: str,
) -> Weights:
    weights = init_weights(config, model_seed, precision)
    if task.kind == "needle":
        layer = (
            selection.norm_layer
            if selection.norm_layer is not None
            else default_norm_layer(config.n_layers)
        )
        weights = needle_qk_weights(weights, layer, needle_gain, needle_boost, needle_carrier)
    return weights


def run_pipeline(
    config: ModelConfig,
    model_seed: int,
    task: SyntheticTask,
    task_seed: int,
    selection: SelectionConfig,
    reorder: bool = False,
    chunk_score: str = "sum",
    needle_gain: float = DEFAULT_NEEDLE_GAIN,
    needle_boost: float = DEFAULT_NEEDLE_BOOST,
    needle_carrier: float = DEFAULT_NEEDLE_CARRIER,
    precision: str = "f64",
    writer: Optional[RecordWriter] = None,
) -> RunRecord:
    """Prefill -> assemble -> (reorder) -> select -> recompute -> one decode step.

    Fidelity metrics compare against a full prefill of the same context layout
    (the permuted layout when reordering). The returned record reconstructs the
    run completely; ttft_s is the only non-deterministic field.
    """
    weights = build_pipeline_weights(
        config, model_seed, task, selection, needle_gain, needle_boost, needle_carrier, precision
    )
    generated = generate_task(task, task_seed)
    chunks = generated.chunks
    prompt = generated.prompt_token_ids

    start = time.perf_counter()
    chunk_kvs = [prefill_chunk(weights, c) for c in chunks]

    if reorder:
        budget = selection.resolve_budget(sum(c.local_length for c in chunks))
        plan, cache, sel_result = reorder_and_reselect(
            weights,
            chunks,
            prompt,
            budget,
            norm_layer=selection.norm_layer,
            chunk_score=chunk_score,
            prefilled=chunk_kvs,
        )
        permutation = plan.permutation
    else:
        from .cache import assemble

        cache = assemble(chunk_kvs)
        sel_result = run_selection(weights, chunks, cache, prompt, selection)
        permutation = np.arange(len(chunks), dtype=np.int64)

    rec_plan = make_plan(cache, sel_result.selected)
    cache = recompute_selected(weights, cache, rec_plan)

    n = cache.context_length
    m = int(prompt.size)
    dec_keys, dec_values = decode_view(cache, config.rope_base)
    dec = forward(
        weights,
        ForwardRequest(
            token_ids=prompt,
            positions=n + np.arange(m),
            mask="causal",
            injected_kv=list(zip(dec_keys, dec_values)),
        ),
    )
    ttft = time.perf_counter() - start

    reference = full_prefill(weights, cache.token_ids[:n])
    fid = cache_fidelity(cache, reference, config.rope_base)
    ref_logits = forward(
        weights,
        ForwardRequest(
            token_ids=np.concatenate([cache.token_ids[:n], prompt]),
            positions=np.arange(n + m),
            mask="causal",
        ),
    ).logits
    logit_fid = float(np.max(np.abs(dec.logits - ref_logits)))

    if sel_result.selected.size:
        sim = rope_similarity_stats(
            n + np.arange(m), sel_result.selected, config.d_head, config.rope_base
        )
        rope_mom, rope_max = sim.mom, sim.max
    else:
        rope_mom = rope_max = None

    needle_hit = None
    if generated.needle_index is not None:
        # Map the needle's original global index through the chunk permutation.
        orig_lengths = generated.chunk_lengths()
        orig_offsets = np.concatenate([[0], np.cumsum(orig_lengths)[:-1]])
        ci = int(np.searchsorted(orig_offsets, generated.needle_index, side="right") - 1)
        local = generated.needle_index - int(orig_offsets[ci])
        new_offsets = {}
        pos = 0
        for slot, orig in enumerate(permutation):
            new_offsets[int(orig)] = pos
            pos += orig_lengths[int(orig)]
        needle_new = new_offsets[ci] + local
        needle_hit = bool(np.isin(needle_new, sel_result.selected))

    metrics = {
        "cache_fidelity": fid.frobenius,
        "cache_max_abs": fid.max_abs,
        "logit_fidelity": logit_fid,
        "rope_mom": rope_mom,
        "rope_max": rope_max,
        "needle_hit": needle_hit,
        "selected_count": int(sel_result.selected.size),
        "first_token": int(np.argmax(dec.logits)),
        "ttft_s": ttft,
    }
    record = RunRecord(
        schema_version=RECORD_SCHEMA_VERSION,
        created_at=datetime.now(timezone.utc).isoformat(),
        model=_model_dict(config, model_seed, precision),
        task={**dataclasses.asdict(task), "seed": task_seed},
        selection=_selection_dict(selection, sel_result.geometry),
        reorder=reorder,
        chunk_score=chunk_score,
        needle_gain=needle_gain,
        needle_boost=needle_boost,
        needle_carrier=needle_carrier,
        metrics=metrics,
        hashes={
            "weights": f"{weights.fingerprint():016x}",
            "selected": f"{hash64_arrays(sel_result.selected):016x}",
            "context": f"{hash64_arrays(cache.token_ids[:n]):016x}",
        },
    )
    if writer is not None:
        writer.append(record)
    return record


def _selection_from_dict(d: dict) -> SelectionConfig:
    geometry = d.get("geometry")
    if geometry is not None:
        geometry = GeometryMode.parse(geometry)
    cfg = SelectionConfig(
        strategy=Strategy.parse(d["strategy"]),
        topk=d.get("topk"),
        ratio=d.get("ratio"),
        norm_layer=d.get("norm_layer"),
        geometry=geometry,
        seed=d.get("seed", 0),
        cacheblend_layers=d.get("cacheblend_layers", 2),
    )
    return cfg


def replay_record(record: RunRecord) -> RunRecord:
    """Re-run a record's configuration; deterministic metrics must match."""
    model = dict(record.model)
    seed = model.pop("seed")
    precision = model.pop("precision")
    config = ModelConfig(**model)
    task_d = dict(record.task)
    task_seed = task_d.pop("seed")
    if task_d.get("boundaries") is not None:
        task_d["boundaries"] = tuple(task_d["boundaries"])
    task = SyntheticTask(**task_d)
    sel_d = dict(record.selection)
    sel_d.pop("geometry_prompt_offset", None)
    selection = _selection_from_dict(sel_d)
    return run_pipeline(
        config,
        seed,
        task,
        task_seed,
        selection,
        reorder=record.reorder,
        chunk_score=record.chunk_score,
        needle_gain=record.needle_gain,
        needle_boost=record.needle_boost,
        needle_carrier=record.needle_carrier,
        precision=precision,
    )


# ---------------------------------------------------------------------------
# Sweeps and reports
# ---------------------------------------------------------------------------

GEOMETRY_SWEEP_MODES = (
    GeometryMode.GLOBAL,
    GeometryMode.HL_HP,
    GeometryMode.HL_TP,
    GeometryMode.TL_TP,
)


def sweep_geometry(
    config: ModelConfig,
    model_seed: int,
    task: SyntheticTask,
    seeds: Sequence[int],
    ratio: float = 0.15,
    norm_layer: Optional[int] = None,
    needle_gain: float = DEFAULT_NEEDLE_GAIN,
    needle_boost: float = DEFAULT_NEEDLE_BOOST,
    needle_carrier: float = DEFAULT_NEEDLE_CARRIER,
    writer: Optional[RecordWriter] = None,
    workers: int = 1,
) -> tuple[list[RunRecord], dict[str, dict]]:
    """Run every geometry over the seeded tasks; summarize hit rate and fidelity."""
    jobs = [
        (mode, seed)
        for mode in GEOMETRY_SWEEP_MODES
        for seed in seeds
    ]

    def one(job):
        mode, seed = job
        sel = SelectionConfig(
            strategy=Strategy.ATTENTION_NORM,
            ratio=ratio,
            norm_layer=norm_layer,
            geometry=mode,
        )
        return run_pipeline(
            config,
            model_seed,
            task,
            seed,
            sel,
            needle_gain=needle_gain,
            needle_boost=needle_boost,
            needle_carrier=needle_carrier,
            writer=writer,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, jobs))
    else:
        records = [one(j) for j in jobs]

    summary: dict[str, dict] = {}
    for mode in GEOMETRY_SWEEP_MODES:
        rs = [r for r in records if r.selection["geometry"] == mode.value]
        hits = [r.metrics["needle_hit"] for r in rs if r.metrics["needle_hit"] is not None]
        summary[mode.value] = {
            "runs": len(rs),
            "hit_rate": float(np.mean(hits)) if hits else None,
            "mean_frobenius": float(np.mean([r.metrics["cache_fidelity"] for r in rs])),
            "mean_logit_fidelity": float(np.mean([r.metrics["logit_fidelity"] for r in rs])),
        }
    return records, summary


def sweep_budget(
    config: ModelConfig,
    model_seed: int,
    task: SyntheticTask,
    seeds: Sequence[int],
    ratios: Sequence[float] = (0.0, 0.05, 0.15, 0.3, 0.6, 1.0),
    norm_layer: Optional[int] = None,
    needle_gain: float = DEFAULT_NEEDLE_GAIN,
    needle_boost: float = DEFAULT_NEEDLE_BOOST,
    needle_carrier: float = DEFAULT_NEEDLE_CARRIER,
    writer: Optional[RecordWriter] = None,
) -> tuple[list[RunRecord], dict[float, float]]:
    """Mean cache fidelity per budget ratio under GLOBAL attention-norm selection."""
    records = []
    summary: dict[float, float] = {}
    for ratio in ratios:
        vals = []
        for seed in seeds:
            sel = SelectionConfig(
                strategy=Strategy.ATTENTION_NORM,
                ratio=ratio,
                norm_layer=norm_layer,
                geometry=GeometryMode.GLOBAL,
            )
            r = run_pipeline(
                config,
                model_seed,
                task,
                seed,
                sel,
                needle_gain=needle_gain,
                needle_boost=needle_boost,
                needle_carrier=needle_carrier,
                writer=writer,
            )
            records.append(r)
            vals.append(r.metrics["cache_fidelity"])
        summary[float(ratio)] = float(np.mean(vals))
    return records, summary


def report_similarity(records: Sequence[RunRecord]) -> list[dict]:
    """Aggregate MoM/Max RoPE similarity per strategy over a record set."""
    if not records:
        raise ConfigurationError("no records to report on")
    fingerprints = {r.hashes["weights"] for r in records}
    if len(fingerprints) != 1:
        raise ConfigurationError("records mix different model weights")
    by_strategy: dict[str, list[RunRecord]] = {}
    for r in records:
        by_strategy.setdefault(r.selection["strategy"], []).append(r)
    rows = []
    for strategy in sorted(by_strategy):
        rs = [r for r in by_strategy[strategy] if r.metrics["rope_mom"] is not None]
        if not rs:
            continue
        rows.append(
            {
                "strategy": strategy,
                "runs": len(rs),
                "mom": float(np.mean([r.metrics["rope_mom"] for r in rs])),
                "max": float(np.mean([r.metrics["rope_max"] for r in rs])),
            }
        )
    return rows
