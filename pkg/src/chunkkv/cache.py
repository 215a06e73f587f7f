"""Chunk-wise KV prefilling, on-disk cache files, and cache assembly.

Cached keys are stored exactly as computed: rotated at the positions used
during prefilling (chunk-local 0..len-1 for chunk prefills). Every cache row
carries the position its key was rotated at, so a consumer can re-rotate rows
to any layout by the position delta; rotating by (target - stored) is exact
because rotary rotations compose additively. The decode view of an assembled
cache re-rotates all context keys to the concatenated global layout, which is
the geometry decoding actually runs under.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DataFormatError
from .model import ForwardRequest, Weights, forward, rotate_heads
from .positions import ChunkSpec
from .util import hash64

CACHE_MAGIC = b"IFKC"
CACHE_VERSION = 1


class Provenance(IntEnum):
    PREFILLED_LOCAL = 0
    RECOMPUTED_GLOBAL = 1
    FULL_PREFILL = 2


@dataclass
class ChunkKV:
    """Per-chunk, per-layer cached keys and values with prefill metadata."""

    chunk_id: str
    token_ids: np.ndarray  # (len,)
    keys: list[np.ndarray]  # per layer, (len, n_heads, d_head)
    values: list[np.ndarray]
    prefill_positions: np.ndarray  # (len,), positions the keys were rotated at
    provenance: Provenance
    model_fingerprint: int

    def __post_init__(self):
        n = int(np.asarray(self.token_ids).size)
        if len(self.keys) != len(self.values) or not self.keys:
            raise ConfigurationError("keys and values must be nonempty per-layer lists")
        for k, v in zip(self.keys, self.values):
            if k.shape != self.keys[0].shape or v.shape != self.keys[0].shape:
                raise ConfigurationError("KV shapes differ across layers")
            if k.shape[0] != n:
                raise ConfigurationError("KV length does not match chunk length")
        if np.asarray(self.prefill_positions).size != n:
            raise ConfigurationError("prefill_positions length does not match chunk length")
        if self.provenance is Provenance.PREFILLED_LOCAL and not np.array_equal(
            self.prefill_positions, np.arange(n)
        ):
            raise ConfigurationError("prefilled_local caches must use positions 0..len-1")

    @property
    def length(self) -> int:
        return int(np.asarray(self.token_ids).size)

    @property
    def n_layers(self) -> int:
        return len(self.keys)


def prefill_chunk(weights: Weights, chunk: ChunkSpec) -> ChunkKV:
    """Prefill one chunk independently: positions 0..len-1, chunk-internal causal mask."""
    if chunk.local_length == 0:
        raise ConfigurationError(f"chunk {chunk.chunk_id!r} is empty")
    if chunk.local_length > weights.config.max_position:
        raise ConfigurationError(
            f"chunk {chunk.chunk_id!r} length {chunk.local_length} exceeds "
            f"max_position {weights.config.max_position}"
        )
    result = forward(
        weights,
        ForwardRequest(
            token_ids=chunk.token_ids,
            positions=np.arange(chunk.local_length),
            mask="causal",
        ),
    )
    return ChunkKV(
        chunk_id=chunk.chunk_id,
        token_ids=chunk.token_ids.copy(),
        keys=result.new_keys,
        values=result.new_values,
        prefill_positions=np.arange(chunk.local_length, dtype=np.int64),
        provenance=Provenance.PREFILLED_LOCAL,
        model_fingerprint=weights.fingerprint(),
    )


# ---------------------------------------------------------------------------
# Cache files ("IFKC" container)
# ---------------------------------------------------------------------------

_PRECISION_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.float32, 1: np.float64}


def save_cache(cache: ChunkKV, path) -> None:
    """Write a chunk cache to disk.

    Layout: magic "IFKC", version u32, model fingerprint u64, chunk id (u32
    length + utf-8 bytes), chunk length u32, n_layers u32, n_heads u32, d_head
    u32, provenance u8, precision code u8 (0 = f32, 1 = f64); then token ids and
    prefill positions as i64 LE; then per layer the K tensor then the V tensor
    as raw little-endian floats in the tagged precision; then a trailing u64 LE
    blake2b-8 checksum of every preceding byte.
    """
    n_layers = cache.n_layers
    length, n_heads, d_head = cache.keys[0].shape
    dt = cache.keys[0].dtype
    if dt not in _PRECISION_CODES:
        raise ConfigurationError(f"unsupported cache dtype {dt}")
    buf = bytearray()
    buf += CACHE_MAGIC
    buf += struct.pack("<I", CACHE_VERSION)
    buf += struct.pack("<Q", cache.model_fingerprint & 0xFFFFFFFFFFFFFFFF)
    cid = cache.chunk_id.encode()
    buf += struct.pack("<I", len(cid))
    buf += cid
    buf += struct.pack("<IIII", length, n_layers, n_heads, d_head)
    buf += struct.pack("<BB", int(cache.provenance), _PRECISION_CODES[dt])
    buf += np.ascontiguousarray(cache.token_ids, dtype="<i8").tobytes()
    buf += np.ascontiguousarray(cache.prefill_positions, dtype="<i8").tobytes()
    le = np.dtype(dt).newbyteorder("<")
    for k, v in zip(cache.keys, cache.values):
        buf += np.ascontiguousarray(k, dtype=le).tobytes()
        buf += np.ascontiguousarray(v, dtype=le).tobytes()
    buf += struct.pack("<Q", hash64(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


def load_cache(path) -> ChunkKV:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != CACHE_MAGIC:
        raise DataFormatError("bad magic: not an IFKC cache file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CACHE_VERSION:
        raise DataFormatError(f"unsupported cache version {version}, expected {CACHE_VERSION}")
    if len(data) < 16:
        raise DataFormatError("truncated cache file")
    payload, trailer = data[:-8], data[-8:]
    (stored_sum,) = struct.unpack("<Q", trailer)
    if hash64(payload) != stored_sum:
        raise DataFormatError("cache checksum mismatch (corrupt file)")

    off = 8
    (fingerprint,) = struct.unpack_from("<Q", data, off)
    off += 8
    (cid_len,) = struct.unpack_from("<I", data, off)
    off += 4
    chunk_id = data[off : off + cid_len].decode()
    off += cid_len
    length, n_layers, n_heads, d_head = struct.unpack_from("<IIII", data, off)
    off += 16
    prov_code, prec_code = struct.unpack_from("<BB", data, off)
    off += 2
    if prec_code not in _CODE_DTYPES:
        raise DataFormatError(f"unknown precision code {prec_code}")
    dt = np.dtype(_CODE_DTYPES[prec_code])

    def take(count, dtype):
        nonlocal off
        nbytes = count * np.dtype(dtype).itemsize
        if off + nbytes > len(payload):
            raise DataFormatError("truncated cache file")
        arr = np.frombuffer(payload, dtype=np.dtype(dtype).newbyteorder("<"), count=count, offset=off)
        off += nbytes
        return arr.astype(dtype)

    token_ids = take(length, np.int64)
    prefill_positions = take(length, np.int64)
    per_layer = length * n_heads * d_head
    keys, values = [], []
    for _ in range(n_layers):
        keys.append(take(per_layer, dt).reshape(length, n_heads, d_head))
        values.append(take(per_layer, dt).reshape(length, n_heads, d_head))
    if off != len(payload):
        raise DataFormatError("trailing bytes inside cache payload")
    return ChunkKV(
        chunk_id=chunk_id,
        token_ids=token_ids,
        keys=keys,
        values=values,
        prefill_positions=prefill_positions,
        provenance=Provenance(prov_code),
        model_fingerprint=fingerprint,
    )


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


@dataclass
class PromptKV:
    """Freshly computed prompt KV (always query-time, never cached)."""

    token_ids: np.ndarray
    keys: list[np.ndarray]
    values: list[np.ndarray]
    positions: np.ndarray


@dataclass
class AssembledCache:
    """Concatenated per-layer KV for chunks in declared order, then the prompt.

    The first context_length rows are context tokens; mapping arrays give the
    bijection global index -> (chunk, local index) over those rows. Prompt rows,
    when present, sit after the context and are always fresh (FULL_PREFILL
    provenance at their true positions).
    """

    chunk_ids: list[str]
    chunk_lengths: list[int]
    token_ids: np.ndarray  # (N + M,)
    keys: list[np.ndarray]  # per layer, (N + M, H, Dh)
    values: list[np.ndarray]
    row_positions: np.ndarray  # (N + M,), rotation position of each key row
    provenance: np.ndarray  # (N + M,) uint8
    chunk_index: np.ndarray  # (N,) index into chunk_ids
    local_index: np.ndarray  # (N,)
    prompt_length: int
    model_fingerprint: int

    @property
    def context_length(self) -> int:
        return int(self.token_ids.size - self.prompt_length)

    @property
    def total_length(self) -> int:
        return int(self.token_ids.size)

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    def mapping(self, global_index: int) -> tuple[str, int]:
        if not 0 <= global_index < self.context_length:
            raise ConfigurationError(
                f"global index {global_index} outside context [0, {self.context_length})"
            )
        return self.chunk_ids[int(self.chunk_index[global_index])], int(self.local_index[global_index])


def assemble(chunks: Sequence[ChunkKV], prompt_kv: Optional[PromptKV] = None) -> AssembledCache:
    """Concatenate chunk caches (declared order) and an optional prompt KV."""
    if not chunks and prompt_kv is None:
        raise ConfigurationError("nothing to assemble: no chunks and no prompt")
    if chunks:
        fp = chunks[0].model_fingerprint
        shape = chunks[0].keys[0].shape[1:]
        n_layers = chunks[0].n_layers
        for c in chunks:
            if c.model_fingerprint != fp:
                raise ConfigurationError(
                    f"chunk {c.chunk_id!r} was prefetched under a different model "
                    f"(fingerprint {c.model_fingerprint:#x} != {fp:#x})"
                )
            if c.n_layers != n_layers or c.keys[0].shape[1:] != shape:
                raise ConfigurationError(f"chunk {c.chunk_id!r} KV shape mismatch")
    else:
        fp = 0
        n_layers = len(prompt_kv.keys)

    parts_tok, parts_pos, parts_prov = [], [], []
    chunk_ids, chunk_lengths = [], []
    chunk_index_parts, local_index_parts = [], []
    for ci, c in enumerate(chunks):
        chunk_ids.append(c.chunk_id)
        chunk_lengths.append(c.length)
        parts_tok.append(np.asarray(c.token_ids, dtype=np.int64))
        parts_pos.append(np.asarray(c.prefill_positions, dtype=np.int64))
        parts_prov.append(np.full(c.length, int(c.provenance), dtype=np.uint8))
        chunk_index_parts.append(np.full(c.length, ci, dtype=np.int64))
        local_index_parts.append(np.arange(c.length, dtype=np.int64))

    prompt_len = 0
    if prompt_kv is not None:
        if len(prompt_kv.keys) != n_layers:
            raise ConfigurationError("prompt KV layer count mismatch")
        prompt_len = int(np.asarray(prompt_kv.token_ids).size)
        parts_tok.append(np.asarray(prompt_kv.token_ids, dtype=np.int64))
        parts_pos.append(np.asarray(prompt_kv.positions, dtype=np.int64))
        parts_prov.append(np.full(prompt_len, int(Provenance.FULL_PREFILL), dtype=np.uint8))

    keys, values = [], []
    for li in range(n_layers):
        k_parts = [c.keys[li] for c in chunks]
        v_parts = [c.values[li] for c in chunks]
        if prompt_kv is not None:
            k_parts.append(prompt_kv.keys[li])
            v_parts.append(prompt_kv.values[li])
        keys.append(np.concatenate(k_parts, axis=0))
        values.append(np.concatenate(v_parts, axis=0))

    return AssembledCache(
        chunk_ids=chunk_ids,
        chunk_lengths=chunk_lengths,
        token_ids=np.concatenate(parts_tok) if parts_tok else np.zeros(0, dtype=np.int64),
        keys=keys,
        values=values,
        row_positions=np.concatenate(parts_pos) if parts_pos else np.zeros(0, dtype=np.int64),
        provenance=np.concatenate(parts_prov) if parts_prov else np.zeros(0, dtype=np.uint8),
        chunk_index=np.concatenate(chunk_index_parts) if chunk_index_parts else np.zeros(0, dtype=np.int64),
        local_index=np.concatenate(local_index_parts) if local_index_parts else np.zeros(0, dtype=np.int64),
        prompt_length=prompt_len,
        model_fingerprint=fp,
    )


def replace_entries(
    cache: AssembledCache,
    indices: np.ndarray,
    new_kv: Sequence[tuple[np.ndarray, np.ndarray]],
    positions: Optional[np.ndarray] = None,
) -> AssembledCache:
    """Replace exactly the listed context rows in every layer.

    new_kv holds per-layer (keys, values) rows aligned with indices; replaced
    rows get RECOMPUTED_GLOBAL provenance. positions records the rotation
    positions of the new key rows and defaults to the global indices themselves
    (the decode layout). All other rows are carried over bit-identically.
    """
    idx = np.asarray(indices, dtype=np.int64).ravel()
    n = cache.context_length
    if idx.size == 0:
        return cache
    if idx.min() < 0 or idx.max() >= n:
        raise ConfigurationError(f"replacement index outside context [0, {n})")
    if np.unique(idx).size != idx.size:
        raise ConfigurationError("duplicate replacement indices")
    if len(new_kv) != cache.n_layers:
        raise ConfigurationError(
            f"new_kv has {len(new_kv)} layers, cache has {cache.n_layers}"
        )
    pos = idx.copy() if positions is None else np.asarray(positions, dtype=np.int64).ravel()
    if pos.size != idx.size:
        raise ConfigurationError("positions length does not match indices")

    keys, values = [], []
    for li, (k_new, v_new) in enumerate(new_kv):
        if k_new.shape[0] != idx.size or v_new.shape[0] != idx.size:
            raise ConfigurationError(f"layer {li} replacement rows do not match indices")
        k = cache.keys[li].copy()
        v = cache.values[li].copy()
        k[idx] = k_new
        v[idx] = v_new
        keys.append(k)
        values.append(v)
    row_positions = cache.row_positions.copy()
    row_positions[idx] = pos
    provenance = cache.provenance.copy()
    provenance[idx] = int(Provenance.RECOMPUTED_GLOBAL)
    return replace(
        cache,
        keys=keys,
        values=values,
        row_positions=row_positions,
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# Decode view and fidelity
# ---------------------------------------------------------------------------


def decode_view(cache: AssembledCache, rope_base: float) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-layer (keys, values) with all rows rotated to the global decode layout.

    Context row i belongs at global position i; prompt rows already carry their
    true positions. Rows whose stored rotation matches the target are copied
    through unchanged (delta 0 is skipped, so recomputed rows stay bit-exact).
    """
    total = cache.total_length
    n = cache.context_length
    target = np.concatenate(
        [np.arange(n, dtype=np.int64), cache.row_positions[n:]]
    ) if total else np.zeros(0, dtype=np.int64)
    deltas = target - cache.row_positions
    need = deltas != 0
    keys_out, values_out = [], []
    for li in range(cache.n_layers):
        k = cache.keys[li].copy()
        if np.any(need):
            k[need] = rotate_heads(cache.keys[li][need], deltas[need], rope_base)
        keys_out.append(k)
        values_out.append(cache.values[li])
    return keys_out, values_out


def full_prefill(weights: Weights, token_ids: np.ndarray, chunk_id: str = "full") -> AssembledCache:
    """Reference cache: the whole context prefilled in one pass at global positions."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    n = int(token_ids.size)
    if n == 0:
        raise ConfigurationError("cannot prefill an empty context")
    result = forward(
        weights,
        ForwardRequest(token_ids=token_ids, positions=np.arange(n), mask="causal"),
    )
    chunk = ChunkKV(
        chunk_id=chunk_id,
        token_ids=token_ids,
        keys=result.new_keys,
        values=result.new_values,
        prefill_positions=np.arange(n, dtype=np.int64),
        provenance=Provenance.FULL_PREFILL,
        model_fingerprint=weights.fingerprint(),
    )
    return assemble([chunk])


@dataclass(frozen=True)
class FidelityReport:
    frobenius: float  # sqrt of the total squared K and V error over all layers
    max_abs: float  # worst single element


def cache_fidelity(cache: AssembledCache, reference: AssembledCache, rope_base: float) -> FidelityReport:
    """Distance between the decode views of two caches' context regions."""
    if cache.context_length != reference.context_length:
        raise ConfigurationError("caches cover different context lengths")
    if cache.n_layers != reference.n_layers:
        raise ConfigurationError("caches have different layer counts")
    n = cache.context_length
    ka, va = decode_view(cache, rope_base)
    kb, vb = decode_view(reference, rope_base)
    sq = 0.0
    worst = 0.0
    for li in range(cache.n_layers):
        dk = ka[li][:n] - kb[li][:n]
        dv = va[li][:n] - vb[li][:n]
        sq += float(np.sum(dk * dk) + np.sum(dv * dv))
        worst = max(worst, float(np.max(np.abs(dk))), float(np.max(np.abs(dv))))
    return FidelityReport(frobenius=float(np.sqrt(sq)), max_abs=worst)
