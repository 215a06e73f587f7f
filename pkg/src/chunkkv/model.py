"""Minimal decoder-only transformer for KV-cache experiments.

The model is a pre-norm stack of RMSNorm -> multi-head causal attention -> RMSNorm
-> gated MLP blocks, with rotary position embeddings applied to queries and keys.
Everything unusual about it exists to make cache surgery observable:

  * per-token position indices are supplied by the caller and need not be
    contiguous, so the same token can be re-encoded at a different position;
  * an external KV prefix can be injected per layer, and the keys in that prefix
    are used exactly as given (they carry whatever rotation they were built with);
  * attention masks can be causal-over-sequence or an explicit allowed-key set
    per query row;
  * attention weights can be captured at chosen layers.

Forward passes are pure functions of (weights, request); there is no internal
state, no dropout, and no biases. Computation runs in the weights' dtype
(float64 for tests, float32 for benchmark runs).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, DataFormatError
from .util import hash64

RMS_EPS = 1e-6

PRECISIONS = {"f32": np.float32, "f64": np.float64}

WEIGHTS_MAGIC = b"IFKV"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of the toy decoder. d_model must equal n_heads * d_head."""

    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_ff: int
    vocab_size: int
    rope_base: float = 10000.0
    max_position: int = 8192

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigurationError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.n_heads < 1:
            raise ConfigurationError(f"n_heads must be >= 1, got {self.n_heads}")
        if self.vocab_size < 2:
            raise ConfigurationError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.d_head % 2 != 0 or self.d_head < 2:
            raise ConfigurationError(f"d_head must be a positive even number, got {self.d_head}")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must equal n_heads*d_head ({self.n_heads * self.d_head})"
            )
        if self.d_ff < 1:
            raise ConfigurationError(f"d_ff must be >= 1, got {self.d_ff}")
        if self.max_position < 1:
            raise ConfigurationError(f"max_position must be >= 1, got {self.max_position}")
        if not self.rope_base > 0:
            raise ConfigurationError(f"rope_base must be positive, got {self.rope_base}")


@dataclass
class LayerWeights:
    attn_norm: np.ndarray  # (d_model,)
    wq: np.ndarray  # (d_model, d_model)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_norm: np.ndarray  # (d_model,)
    w_gate: np.ndarray  # (d_model, d_ff)
    w_up: np.ndarray  # (d_model, d_ff)
    w_down: np.ndarray  # (d_ff, d_model)

    def tensors(self):
        return [
            ("attn_norm", self.attn_norm),
            ("wq", self.wq),
            ("wk", self.wk),
            ("wv", self.wv),
            ("wo", self.wo),
            ("mlp_norm", self.mlp_norm),
            ("w_gate", self.w_gate),
            ("w_up", self.w_up),
            ("w_down", self.w_down),
        ]


@dataclass
class Weights:
    config: ModelConfig
    embedding: np.ndarray  # (vocab_size, d_model)
    layers: list[LayerWeights]
    final_norm: np.ndarray  # (d_model,)
    out_head: np.ndarray  # (d_model, vocab_size)
    _fingerprint: Optional[int] = field(default=None, repr=False, compare=False)

    @property
    def dtype(self) -> np.dtype:
        return self.embedding.dtype

    @property
    def precision(self) -> str:
        return "f64" if self.dtype == np.float64 else "f32"

    def named_tensors(self):
        """All tensors in the documented serialization order."""
        yield "embedding", self.embedding
        for i, lw in enumerate(self.layers):
            for name, t in lw.tensors():
                yield f"layer{i}.{name}", t
        yield "final_norm", self.final_norm
        yield "out_head", self.out_head

    def fingerprint(self) -> int:
        """64-bit identity of (config, precision, all tensor bytes)."""
        if self._fingerprint is None:
            import hashlib

            h = hashlib.blake2b(digest_size=8)
            c = self.config
            h.update(
                struct.pack(
                    "<7qd",
                    c.n_layers,
                    c.n_heads,
                    c.d_model,
                    c.d_head,
                    c.d_ff,
                    c.vocab_size,
                    c.max_position,
                    c.rope_base,
                )
            )
            h.update(self.precision.encode())
            for name, t in self.named_tensors():
                h.update(name.encode())
                h.update(np.ascontiguousarray(t).tobytes())
            self._fingerprint = int.from_bytes(h.digest(), "little")
        return self._fingerprint

    def astype(self, precision: str) -> "Weights":
        if precision not in PRECISIONS:
            raise ConfigurationError(f"unknown precision {precision!r}, expected one of {sorted(PRECISIONS)}")
        dt = PRECISIONS[precision]
        if dt == self.dtype:
            return self
        return Weights(
            config=self.config,
            embedding=self.embedding.astype(dt),
            layers=[
                LayerWeights(**{name: t.astype(dt) for name, t in lw.tensors()}) for lw in self.layers
            ],
            final_norm=self.final_norm.astype(dt),
            out_head=self.out_head.astype(dt),
        )


def init_weights(config: ModelConfig, seed: int, precision: str = "f64") -> Weights:
    """Deterministic Gaussian init.

    All tensors are drawn in float64 in a fixed order (embedding, then per layer
    wq, wk, wv, wo, w_gate, w_up, w_down, then out_head) from PCG64(seed), then
    cast to the requested precision. Projections are scaled by 1/sqrt(fan_in);
    the embedding table has unit variance; norm gains start at one. The same
    (config, seed, precision) always yields byte-identical tensors.
    """
    if precision not in PRECISIONS:
        raise ConfigurationError(f"unknown precision {precision!r}, expected one of {sorted(PRECISIONS)}")
    rng = np.random.default_rng(seed)
    d, dff, v = config.d_model, config.d_ff, config.vocab_size
    proj_scale = 1.0 / np.sqrt(d)
    down_scale = 1.0 / np.sqrt(dff)

    embedding = rng.standard_normal((v, d))
    layers = []
    for _ in range(config.n_layers):
        wq = rng.standard_normal((d, d)) * proj_scale
        wk = rng.standard_normal((d, d)) * proj_scale
        wv = rng.standard_normal((d, d)) * proj_scale
        wo = rng.standard_normal((d, d)) * proj_scale
        w_gate = rng.standard_normal((d, dff)) * proj_scale
        w_up = rng.standard_normal((d, dff)) * proj_scale
        w_down = rng.standard_normal((dff, d)) * down_scale
        layers.append(
            LayerWeights(
                attn_norm=np.ones(d),
                wq=wq,
                wk=wk,
                wv=wv,
                wo=wo,
                mlp_norm=np.ones(d),
                w_gate=w_gate,
                w_up=w_up,
                w_down=w_down,
            )
        )
    out_head = rng.standard_normal((d, v)) * proj_scale
    w = Weights(
        config=config,
        embedding=embedding,
        layers=layers,
        final_norm=np.ones(d),
        out_head=out_head,
    )
    return w.astype(precision) if precision != "f64" else w


# ---------------------------------------------------------------------------
# Rotary position embedding
# ---------------------------------------------------------------------------


def rope_frequencies(d: int, base: float) -> np.ndarray:
    """Angular frequencies theta_i = base^(-2i/d) for i in 0..d/2-1."""
    if d % 2 != 0 or d < 2:
        raise ConfigurationError(f"RoPE dimension must be a positive even number, got {d}")
    i = np.arange(d // 2, dtype=np.float64)
    return np.power(float(base), -2.0 * i / d)


def apply_rope(vector: np.ndarray, position: float, base: float = 10000.0) -> np.ndarray:
    """Rotate a single head-dimension vector to a position.

    Each adjacent pair (x[2i], x[2i+1]) is rotated by angle theta_i * position.
    Rotation is norm-preserving and composes additively in position, so a key
    rotated at position p can be moved to position q by rotating it by q - p.
    """
    vector = np.asarray(vector)
    if vector.ndim != 1:
        raise ConfigurationError(f"apply_rope expects a 1-D vector, got shape {vector.shape}")
    theta = rope_frequencies(vector.shape[0], base)
    ang = theta * float(position)
    cos, sin = np.cos(ang), np.sin(ang)
    out = np.empty_like(vector, dtype=np.result_type(vector.dtype, np.float64))
    xe, xo = vector[0::2], vector[1::2]
    out[0::2] = xe * cos - xo * sin
    out[1::2] = xe * sin + xo * cos
    return out.astype(vector.dtype, copy=False)


def rotate_heads(x: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    """Rotate per-token head vectors: x is (T, n_heads, d_head), positions is (T,).

    The same frequency schedule is shared by all heads. Positions may be any
    real values; deltas are used for re-rotating cached keys.
    """
    x = np.asarray(x)
    t, _, dh = x.shape
    theta = rope_frequencies(dh, base)
    ang = np.asarray(positions, dtype=np.float64).reshape(t, 1) * theta  # (T, dh/2)
    cos = np.cos(ang)[:, None, :]
    sin = np.sin(ang)[:, None, :]
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


# ---------------------------------------------------------------------------
# Block primitives shared by forward() and the selective recomputation path
# ---------------------------------------------------------------------------


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return x / np.sqrt(ms + RMS_EPS) * gain


def _silu(x: np.ndarray) -> np.ndarray:
    # numerically stable x * sigmoid(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = x[pos] / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = x[~pos] * ex / (1.0 + ex)
    return out


def mlp_block(x: np.ndarray, lw: LayerWeights) -> np.ndarray:
    return (_silu(x @ lw.w_gate) * (x @ lw.w_up)) @ lw.w_down


def masked_attention(
    q: np.ndarray, keys: np.ndarray, values: np.ndarray, allowed: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Multi-head attention with an explicit boolean key mask.

    q: (T, H, Dh) rotated queries; keys/values: (S, H, Dh); allowed: (T, S) with
    at least one permitted key per row. Returns (context (T, H, Dh),
    attention weights (H, T, S)); each weight row sums to 1 over permitted keys.
    """
    dh = q.shape[-1]
    # math.sqrt keeps the scale a weak Python float so f32 inputs stay f32
    scores = np.matmul(q.transpose(1, 0, 2), keys.transpose(1, 2, 0)) / math.sqrt(dh)  # (H, T, S)
    scores = np.where(allowed[None, :, :], scores, -np.inf)
    m = np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores - m)
    e = np.where(allowed[None, :, :], e, 0.0)
    attn = e / np.sum(e, axis=-1, keepdims=True)
    ctx = np.matmul(attn, values.transpose(1, 0, 2))  # (H, T, Dh)
    return ctx.transpose(1, 0, 2), attn


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

MaskSpec = Union[str, Sequence[np.ndarray]]


@dataclass
class ForwardRequest:
    """One forward pass over a token run, with full external control.

    mask is either the string "causal" (token i may attend to the whole injected
    prefix plus request tokens 0..i) or a sequence of index arrays, one per
    request token, listing permitted key indices in the combined key space
    (injected prefix occupies indices 0..P-1, request tokens P..P+T-1). Explicit
    rows may only reference keys at or before the token's own combined index.
    """

    token_ids: np.ndarray
    positions: np.ndarray
    mask: MaskSpec = "causal"
    injected_kv: Optional[list[tuple[np.ndarray, np.ndarray]]] = None
    capture: frozenset[int] = frozenset()


@dataclass
class ForwardResult:
    hidden_states: list[np.ndarray]  # per layer, (T, d_model), block outputs
    new_keys: list[np.ndarray]  # per layer, (T, H, Dh), rotated at request positions
    new_values: list[np.ndarray]  # per layer, (T, H, Dh)
    attention: dict[int, np.ndarray]  # layer -> (H, T, S)
    logits: np.ndarray  # (vocab_size,), final position


def _build_mask(mask: MaskSpec, t: int, p: int) -> np.ndarray:
    s = p + t
    if isinstance(mask, str):
        if mask != "causal":
            raise ConfigurationError(f"unknown mask kind {mask!r}")
        allowed = np.zeros((t, s), dtype=bool)
        for i in range(t):
            allowed[i, : p + i + 1] = True
        return allowed
    rows = list(mask)
    if len(rows) != t:
        raise ConfigurationError(f"explicit mask has {len(rows)} rows for {t} query tokens")
    allowed = np.zeros((t, s), dtype=bool)
    for i, row in enumerate(rows):
        idx = np.asarray(row, dtype=np.int64)
        if idx.size == 0:
            raise ConfigurationError(f"mask row {i} permits no keys")
        if idx.min() < 0 or idx.max() >= s:
            raise ConfigurationError(f"mask row {i} references key index outside [0, {s})")
        if idx.max() > p + i:
            raise ConfigurationError(
                f"mask row {i} permits key {int(idx.max())} after its own logical index {p + i}"
            )
        allowed[i, idx] = True
    return allowed


def forward(weights: Weights, request: ForwardRequest) -> ForwardResult:
    """Run the decoder over a request.

    RoPE is applied to this run's queries and keys at the supplied per-token
    positions. Injected KV tensors are attended to exactly as given. Attention
    weights (post-softmax, zero at masked keys) are recorded for each layer in
    request.capture. Logits are returned for the last request token.
    """
    cfg = weights.config
    token_ids = np.asarray(request.token_ids, dtype=np.int64)
    positions = np.asarray(request.positions, dtype=np.int64)
    if token_ids.ndim != 1 or token_ids.size == 0:
        raise ConfigurationError("token_ids must be a nonempty 1-D sequence")
    if positions.shape != token_ids.shape:
        raise ConfigurationError(
            f"positions length {positions.shape} does not match token_ids {token_ids.shape}"
        )
    if token_ids.min() < 0 or token_ids.max() >= cfg.vocab_size:
        raise ConfigurationError("token id outside vocabulary")
    if positions.min() < 0 or positions.max() >= cfg.max_position:
        raise ConfigurationError(
            f"position outside [0, {cfg.max_position}): {int(positions.max())}"
        )
    capture = frozenset(request.capture)
    for layer in capture:
        if not 0 <= layer < cfg.n_layers:
            raise ConfigurationError(f"capture layer {layer} outside [0, {cfg.n_layers})")

    t = token_ids.size
    injected = request.injected_kv
    if injected is not None:
        if len(injected) != cfg.n_layers:
            raise ConfigurationError(
                f"injected_kv has {len(injected)} layers, model has {cfg.n_layers}"
            )
        p = injected[0][0].shape[0]
        for li, (k, v) in enumerate(injected):
            want = (p, cfg.n_heads, cfg.d_head)
            if k.shape != want or v.shape != want:
                raise ConfigurationError(
                    f"injected KV shape mismatch at layer {li}: {k.shape}/{v.shape}, expected {want}"
                )
    else:
        p = 0

    allowed = _build_mask(request.mask, t, p)
    dt = weights.dtype

    h = weights.embedding[token_ids].astype(dt, copy=True)
    hidden_states: list[np.ndarray] = []
    new_keys: list[np.ndarray] = []
    new_values: list[np.ndarray] = []
    attention: dict[int, np.ndarray] = {}

    for li, lw in enumerate(weights.layers):
        x = rms_norm(h, lw.attn_norm)
        q = (x @ lw.wq).reshape(t, cfg.n_heads, cfg.d_head)
        k = (x @ lw.wk).reshape(t, cfg.n_heads, cfg.d_head)
        v = (x @ lw.wv).reshape(t, cfg.n_heads, cfg.d_head)
        q = rotate_heads(q, positions, cfg.rope_base)
        k = rotate_heads(k, positions, cfg.rope_base)
        if injected is not None:
            keys = np.concatenate([injected[li][0].astype(dt, copy=False), k], axis=0)
            vals = np.concatenate([injected[li][1].astype(dt, copy=False), v], axis=0)
        else:
            keys, vals = k, v
        ctx, attn = masked_attention(q, keys, vals, allowed)
        if li in capture:
            attention[li] = attn
        h = h + ctx.reshape(t, cfg.d_model) @ lw.wo
        h = h + mlp_block(rms_norm(h, lw.mlp_norm), lw)
        hidden_states.append(h.copy())
        new_keys.append(k)
        new_values.append(v)

    final = rms_norm(h, weights.final_norm)
    logits = final[-1] @ weights.out_head
    return ForwardResult(
        hidden_states=hidden_states,
        new_keys=new_keys,
        new_values=new_values,
        attention=attention,
        logits=logits,
    )


def greedy_token(logits: np.ndarray) -> int:
    """Greedy argmax decode of one token (lowest id wins ties)."""
    return int(np.argmax(logits))


# ---------------------------------------------------------------------------
# Weight persistence ("IFKV" container)
# ---------------------------------------------------------------------------

_PRECISION_TAGS = {"f32": b"f32\x00", "f64": b"f64\x00"}
_TAG_PRECISIONS = {v: k for k, v in _PRECISION_TAGS.items()}


def save_weights(weights: Weights, path) -> None:
    """Write weights to the IFKV container.

    Layout: magic "IFKV", version u32, seven config integers (n_layers, n_heads,
    d_model, d_head, d_ff, vocab_size, max_position) as u32 LE, rope_base as f64
    LE, a 4-byte precision tag, then each tensor in named_tensors() order as
    (name length u32, name bytes, rank u32, dims u64 each, raw little-endian
    elements).
    """
    cfg = weights.config
    buf = bytearray()
    buf += WEIGHTS_MAGIC
    buf += struct.pack("<I", WEIGHTS_VERSION)
    buf += struct.pack(
        "<7I",
        cfg.n_layers,
        cfg.n_heads,
        cfg.d_model,
        cfg.d_head,
        cfg.d_ff,
        cfg.vocab_size,
        cfg.max_position,
    )
    buf += struct.pack("<d", cfg.rope_base)
    buf += _PRECISION_TAGS[weights.precision]
    for name, tensor in weights.named_tensors():
        nb = name.encode()
        buf += struct.pack("<I", len(nb))
        buf += nb
        buf += struct.pack("<I", tensor.ndim)
        for dim in tensor.shape:
            buf += struct.pack("<Q", dim)
        buf += np.ascontiguousarray(tensor, dtype=f"<{tensor.dtype.kind}{tensor.dtype.itemsize}").tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.off = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise DataFormatError(f"truncated {self.what} file")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(path) -> Weights:
    r = _Reader(Path(path).read_bytes(), "weights")
    if r.take(4) != WEIGHTS_MAGIC:
        raise DataFormatError("bad magic: not an IFKV weights file")
    (version,) = r.unpack("<I")
    if version != WEIGHTS_VERSION:
        raise DataFormatError(f"unsupported weights version {version}, expected {WEIGHTS_VERSION}")
    n_layers, n_heads, d_model, d_head, d_ff, vocab, max_pos = r.unpack("<7I")
    (rope_base,) = r.unpack("<d")
    tag = r.take(4)
    if tag not in _TAG_PRECISIONS:
        raise DataFormatError(f"unknown precision tag {tag!r}")
    precision = _TAG_PRECISIONS[tag]
    dt = np.dtype(PRECISIONS[precision]).newbyteorder("<")
    cfg = ModelConfig(
        n_layers=n_layers,
        n_heads=n_heads,
        d_model=d_model,
        d_head=d_head,
        d_ff=d_ff,
        vocab_size=vocab,
        rope_base=rope_base,
        max_position=max_pos,
    )

    tensors = {}
    layer_names = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down")
    expected = ["embedding"]
    for i in range(n_layers):
        expected += [f"layer{i}.{n}" for n in layer_names]
    expected += ["final_norm", "out_head"]
    for want in expected:
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode()
        if name != want:
            raise DataFormatError(f"unexpected tensor {name!r}, expected {want!r}")
        (rank,) = r.unpack("<I")
        dims = [r.unpack("<Q")[0] for _ in range(rank)]
        count = int(np.prod(dims)) if dims else 1
        raw = r.take(count * dt.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(PRECISIONS[precision])
    if r.off != len(r.data):
        raise DataFormatError("trailing bytes after final tensor")

    layers = []
    for i in range(n_layers):
        layers.append(
            LayerWeights(
                attn_norm=tensors[f"layer{i}.attn_norm"],
                wq=tensors[f"layer{i}.wq"],
                wk=tensors[f"layer{i}.wk"],
                wv=tensors[f"layer{i}.wv"],
                wo=tensors[f"layer{i}.wo"],
                mlp_norm=tensors[f"layer{i}.mlp_norm"],
                w_gate=tensors[f"layer{i}.w_gate"],
                w_up=tensors[f"layer{i}.w_up"],
                w_down=tensors[f"layer{i}.w_down"],
            )
        )
    w = Weights(
        config=cfg,
        embedding=tensors["embedding"],
        layers=layers,
        final_norm=tensors["final_norm"],
        out_head=tensors["out_head"],
    )
    if w.embedding.shape != (vocab, d_model) or w.out_head.shape != (d_model, vocab):
        raise DataFormatError("tensor shapes inconsistent with header config")
    return w
