"""Command-line front end.

Exit codes: 0 on success, 2 for configuration/usage errors, 3 for data or
file-format errors. All subcommands accept --config pointing at a JSON file
whose keys mirror the dataclass fields (sections: model, task, selection,
needle, costmodel); explicit flags override file values.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cache import assemble, cache_fidelity, full_prefill, load_cache, prefill_chunk, save_cache
from .costmodel import (
    STRATEGIES,
    CostModelParams,
    run_parallel_prefill,
    simulate,
)
from .errors import ConfigurationError, DataFormatError
from .harness import (
    DEFAULT_NEEDLE_BOOST,
    DEFAULT_NEEDLE_CARRIER,
    DEFAULT_NEEDLE_GAIN,
    RecordWriter,
    RunRecord,
    SyntheticTask,
    build_pipeline_weights,
    generate_task,
    read_records,
    replay_record,
    report_similarity,
    run_pipeline,
    sweep_budget,
    sweep_geometry,
    toy_config,
)
from .model import ModelConfig, init_weights
from .positions import GeometryMode
from .selection import SelectionConfig, Strategy, run_selection


def _load_config_file(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigurationError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise DataFormatError(f"config file is not valid JSON: {e}") from e


def _merged(args, section: str, key: str, flag_value, default):
    """Flag > config-file section value > default."""
    if flag_value is not None:
        return flag_value
    if args._file_config and section in args._file_config:
        if key in args._file_config[section]:
            return args._file_config[section][key]
    return default


def _model_config(args) -> ModelConfig:
    g = lambda key, flag, default: _merged(args, "model", key, flag, default)
    n_heads = g("n_heads", args.heads, 4)
    d_head = g("d_head", args.dhead, 16)
    return ModelConfig(
        n_layers=g("n_layers", args.layers, 4),
        n_heads=n_heads,
        d_model=n_heads * d_head,
        d_head=d_head,
        d_ff=g("d_ff", args.dff, 256),
        vocab_size=g("vocab_size", args.vocab, 256),
        rope_base=g("rope_base", args.rope_base, 10000.0),
        max_position=g("max_position", args.max_position, 16384),
    )


def _task(args) -> SyntheticTask:
    g = lambda key, flag, default: _merged(args, "task", key, flag, default)
    boundaries = g("boundaries", args.boundaries, None)
    fixed_size = g("fixed_size", args.chunk_size, None)
    if boundaries is not None:
        if isinstance(boundaries, str):
            boundaries = tuple(int(b) for b in boundaries.split(",") if b.strip())
        else:
            boundaries = tuple(int(b) for b in boundaries)
        fixed_size = None
    elif fixed_size is None:
        fixed_size = 64
    return SyntheticTask(
        kind=g("kind", args.task_kind, "needle"),
        total_length=g("total_length", args.length, 256),
        needle_depth=g("needle_depth", args.needle_depth, None),
        fixed_size=fixed_size,
        boundaries=boundaries,
        prompt_length=g("prompt_length", args.prompt_length, 8),
        prompt_needle_copies=g("prompt_needle_copies", args.needle_copies, 1),
        vocab_size=g("vocab_size", args.vocab, 256),
    )


def _selection(args) -> SelectionConfig:
    g = lambda key, flag, default: _merged(args, "selection", key, flag, default)
    topk = g("topk", args.topk, None)
    ratio = g("ratio", args.ratio, None)
    if topk is None and ratio is None:
        ratio = 0.15
    return SelectionConfig(
        strategy=Strategy.parse(g("strategy", args.strategy, "attention-norm")),
        topk=topk,
        ratio=ratio,
        norm_layer=g("norm_layer", args.norm_layer, None),
        geometry=g("geometry", args.geometry, None),
        seed=g("seed", args.selection_seed, 0),
        cacheblend_layers=g("cacheblend_layers", args.cacheblend_layers, 2),
    )


def _needle_params(args) -> tuple[float, float, float]:
    g = lambda key, flag, default: _merged(args, "needle", key, flag, default)
    return (
        g("gain", args.needle_gain, DEFAULT_NEEDLE_GAIN),
        g("boost", args.needle_boost, DEFAULT_NEEDLE_BOOST),
        g("carrier", args.needle_carrier, DEFAULT_NEEDLE_CARRIER),
    )


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="model weight seed (default 7)")
    p.add_argument("--precision", choices=("f32", "f64"), default=None)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--dhead", type=int, default=None)
    p.add_argument("--dff", type=int, default=None)
    p.add_argument("--vocab", type=int, default=None)
    p.add_argument("--max-position", type=int, default=None)
    p.add_argument("--rope-base", type=float, default=None)
    p.add_argument("--task-kind", choices=("needle", "uniform_noise"), default=None)
    p.add_argument("--length", type=int, default=None, help="total context length")
    p.add_argument("--chunk-size", type=int, default=None)
    p.add_argument("--boundaries", default=None, help="comma-separated passage split offsets")
    p.add_argument("--prompt-length", type=int, default=None)
    p.add_argument("--needle-depth", type=float, default=None)
    p.add_argument("--needle-copies", type=int, default=None)
    p.add_argument("--task-seed", type=int, default=0)
    p.add_argument("--strategy", default=None, help="attention-norm | cacheblend | epic | random")
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--norm-layer", type=int, default=None)
    p.add_argument("--geometry", default=None, help="GLOBAL | HL-HP | HL-TP | TL-TP")
    p.add_argument("--selection-seed", type=int, default=None)
    p.add_argument("--cacheblend-layers", type=int, default=None)
    p.add_argument("--needle-gain", type=float, default=None)
    p.add_argument("--needle-boost", type=float, default=None)
    p.add_argument("--needle-carrier", type=float, default=None)


def _setup(args):
    args._file_config = _load_config_file(args.config) if args.config else None
    model_seed = args.seed if args.seed is not None else 7
    precision = args.precision or "f64"
    return _model_config(args), model_seed, precision


def cmd_prefill(args) -> int:
    config, model_seed, precision = _setup(args)
    task = _task(args)
    selection = _selection(args)
    gain, boost, carrier = _needle_params(args)
    weights = build_pipeline_weights(config, model_seed, task, selection, gain, boost, carrier, precision)
    generated = generate_task(task, args.task_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.workers > 1:
        caches, elapsed = run_parallel_prefill(weights, generated.chunks, args.workers)
    else:
        import time

        t0 = time.perf_counter()
        caches = [prefill_chunk(weights, c) for c in generated.chunks]
        elapsed = time.perf_counter() - t0
    for cache in caches:
        path = out / f"{cache.chunk_id}.ifkc"
        save_cache(cache, path)
        print(f"{path}  tokens={cache.length}  layers={cache.n_layers}")
    print(f"prefilled {len(caches)} chunks in {elapsed:.3f}s (workers={args.workers})")
    return 0


def cmd_assemble(args) -> int:
    caches = [load_cache(p) for p in args.caches]
    cache = assemble(caches)
    print(f"chunks: {cache.chunk_ids}")
    print(f"context length: {cache.context_length}")
    for probe in (0, cache.context_length // 2, cache.context_length - 1):
        cid, local = cache.mapping(probe)
        print(f"mapping[{probe}] -> ({cid}, {local})")
    return 0


def _pipeline_record(args, reorder=False) -> RunRecord:
    config, model_seed, precision = _setup(args)
    task = _task(args)
    selection = _selection(args)
    gain, boost, carrier = _needle_params(args)
    writer = RecordWriter(args.records) if getattr(args, "records", None) else None
    return run_pipeline(
        config,
        model_seed,
        task,
        args.task_seed,
        selection,
        reorder=reorder,
        chunk_score=getattr(args, "chunk_score", "sum"),
        needle_gain=gain,
        needle_boost=boost,
        needle_carrier=carrier,
        precision=precision,
        writer=writer,
    )


def cmd_select(args) -> int:
    config, model_seed, precision = _setup(args)
    task = _task(args)
    selection = _selection(args)
    gain, boost, carrier = _needle_params(args)
    weights = build_pipeline_weights(config, model_seed, task, selection, gain, boost, carrier, precision)
    generated = generate_task(task, args.task_seed)
    chunk_kvs = [prefill_chunk(weights, c) for c in generated.chunks]
    cache = assemble(chunk_kvs)
    result = run_selection(weights, generated.chunks, cache, generated.prompt_token_ids, selection)
    print(f"strategy: {result.strategy}  geometry: {result.geometry}  k={result.budget}")
    print("selected:", " ".join(str(i) for i in result.selected))
    order = np.argsort(-result.scores, kind="stable")[:10]
    print("top scores:", " ".join(f"{i}:{result.scores[i]:.4f}" for i in order))
    if generated.needle_index is not None:
        hit = bool(np.isin(generated.needle_index, result.selected))
        print(f"needle index: {generated.needle_index}  hit: {hit}")
    return 0


def cmd_recompute(args) -> int:
    record = _pipeline_record(args)
    m = record.metrics
    print(f"cache_fidelity (frobenius): {m['cache_fidelity']:.6g}")
    print(f"cache_max_abs: {m['cache_max_abs']:.6g}")
    print(f"logit_fidelity: {m['logit_fidelity']:.6g}")
    return 0


def cmd_run(args) -> int:
    if args.replay:
        records = read_records(args.replay)
        if not records:
            raise DataFormatError(f"no records in {args.replay}")
        for original in records:
            fresh = replay_record(original)
            same = fresh.deterministic_metrics() == original.deterministic_metrics()
            status = "ok" if same else "MISMATCH"
            print(f"replay {original.created_at}: {status}")
            if not same:
                return 3
        return 0
    record = _pipeline_record(args, reorder=args.reorder)
    print(record.to_json())
    return 0


def cmd_sweep_geometry(args) -> int:
    config, model_seed, _ = _setup(args)
    task = _task(args)
    gain, boost, carrier = _needle_params(args)
    writer = RecordWriter(args.records) if args.records else None
    ratio = args.ratio if args.ratio is not None else 0.15
    _, summary = sweep_geometry(
        config,
        model_seed,
        task,
        seeds=range(args.seeds),
        ratio=ratio,
        norm_layer=args.norm_layer,
        needle_gain=gain,
        needle_boost=boost,
        needle_carrier=carrier,
        writer=writer,
        workers=args.workers,
    )
    print(f"{'geometry':8s} {'runs':>4s} {'hit_rate':>8s} {'mean_frob':>12s} {'mean_logit':>12s}")
    for mode, s in summary.items():
        hit = "-" if s["hit_rate"] is None else f"{s['hit_rate']:.3f}"
        print(f"{mode:8s} {s['runs']:4d} {hit:>8s} {s['mean_frobenius']:12.4f} {s['mean_logit_fidelity']:12.5f}")
    return 0


def cmd_sweep_budget(args) -> int:
    config, model_seed, _ = _setup(args)
    task = _task(args)
    gain, boost, carrier = _needle_params(args)
    writer = RecordWriter(args.records) if args.records else None
    ratios = [float(r) for r in args.ratios.split(",")]
    _, summary = sweep_budget(
        config,
        model_seed,
        task,
        seeds=range(args.seeds),
        ratios=ratios,
        norm_layer=args.norm_layer,
        needle_gain=gain,
        needle_boost=boost,
        needle_carrier=carrier,
        writer=writer,
    )
    print(f"{'ratio':>6s} {'mean_frob':>12s}")
    for ratio, frob in summary.items():
        print(f"{ratio:6.2f} {frob:12.6f}")
    return 0


def cmd_needle(args) -> int:
    _setup(args)
    task = _task(args)
    generated = generate_task(task, args.task_seed)
    print(f"kind: {task.kind}  total: {task.total_length}  prompt: {task.prompt_length}")
    print(f"chunks: {[c.local_length for c in generated.chunks]}")
    if generated.needle_index is not None:
        print(f"needle index: {generated.needle_index}  token: {generated.needle_token}")
    print("prompt tokens:", " ".join(str(t) for t in generated.prompt_token_ids))
    return 0


def cmd_rope_sim(args) -> int:
    config, model_seed, _ = _setup(args)
    task = _task(args)
    gain, boost, carrier = _needle_params(args)
    strategies = [Strategy.parse(s) for s in args.strategies.split(",")]
    records = []
    for strategy in strategies:
        for seed in range(args.seeds):
            sel = SelectionConfig(
                strategy=strategy,
                ratio=args.ratio if args.ratio is not None else 0.15,
                geometry=GeometryMode.GLOBAL if strategy is Strategy.ATTENTION_NORM else None,
            )
            records.append(
                run_pipeline(
                    config, model_seed, task, seed, sel,
                    needle_gain=gain, needle_boost=boost, needle_carrier=carrier,
                )
            )
    rows = report_similarity(records)
    print(f"{'strategy':16s} {'runs':>4s} {'MoM':>8s} {'Max':>8s}")
    for row in rows:
        print(f"{row['strategy']:16s} {row['runs']:4d} {row['mom']:8.4f} {row['max']:8.4f}")
    return 0


def cmd_simulate_sp(args) -> int:
    overrides = {}
    if args.params:
        overrides = _load_config_file(args.params)
    params = CostModelParams(
        **{
            **overrides,
            "device_count": args.devices,
            "recompute_ratio": args.ratio,
        }
    )
    report = simulate(params, args.seqlen)
    for s in STRATEGIES:
        print(
            f"{s} ttft_s={report.ttft_s[s]:.6f} speedup={report.speedup[s]:.4f} "
            f"comm_bytes={report.comm_bytes[s]:.0f}"
        )
    return 0


def cmd_cache(args) -> int:
    if args.action != "inspect":
        raise ConfigurationError(f"unknown cache action {args.action!r}")
    cache = load_cache(args.file)
    length, n_heads, d_head = cache.keys[0].shape
    print(f"chunk_id: {cache.chunk_id}")
    print(f"model fingerprint: {cache.model_fingerprint:016x}")
    print(f"tokens: {length}  layers: {cache.n_layers}  heads: {n_heads}  d_head: {d_head}")
    print(f"provenance: {cache.provenance.name}")
    print(f"dtype: {cache.keys[0].dtype}")
    print(f"positions: {cache.prefill_positions[:8].tolist()}{'...' if length > 8 else ''}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chunkkv",
        description="Chunk-wise KV prefilling with attention-guided selective recomputation.",
    )
    parser.add_argument("--version", action="version", version=f"chunkkv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prefill", help="prefill task chunks and write cache files")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory for .ifkc files")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_prefill)

    p = sub.add_parser("assemble", help="assemble chunk cache files and print the layout")
    p.add_argument("caches", nargs="+")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("select", help="score and select recomputation targets")
    _add_common(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("recompute", help="run select + recompute and print fidelity")
    _add_common(p)
    p.set_defaults(func=cmd_recompute)

    p = sub.add_parser("run", help="full pipeline; emits a JSON run record")
    _add_common(p)
    p.add_argument("--reorder", action="store_true")
    p.add_argument("--chunk-score", choices=("sum", "mean", "max"), default="sum")
    p.add_argument("--records", default=None, help="append the record to this JSONL file")
    p.add_argument("--replay", default=None, help="replay records from this file and verify")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-geometry", help="hit rate and fidelity per RoPE geometry")
    _add_common(p)
    p.add_argument("--seeds", type=int, default=50)
    p.add_argument("--records", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep_geometry)

    p = sub.add_parser("sweep-budget", help="mean fidelity per recomputation budget")
    _add_common(p)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--ratios", default="0.0,0.05,0.15,0.3,0.6,1.0")
    p.add_argument("--records", default=None)
    p.set_defaults(func=cmd_sweep_budget)

    p = sub.add_parser("needle", help="generate and describe a synthetic task")
    _add_common(p)
    p.set_defaults(func=cmd_needle)

    p = sub.add_parser("rope-sim", help="MoM/Max RoPE similarity per strategy")
    _add_common(p)
    p.add_argument("--seeds", type=int, default=50)
    p.add_argument("--strategies", default="attention-norm,epic")
    p.set_defaults(func=cmd_rope_sim)

    p = sub.add_parser("simulate-sp", help="sequence-parallel TTFT cost model")
    p.add_argument("--devices", type=int, default=4)
    p.add_argument("--seqlen", type=int, required=True)
    p.add_argument("--ratio", type=float, default=0.15)
    p.add_argument("--params", default=None, help="JSON file with CostModelParams overrides")
    p.set_defaults(func=cmd_simulate_sp)

    p = sub.add_parser("cache", help="cache file utilities")
    p.add_argument("action", choices=("inspect",))
    p.add_argument("file")
    p.set_defaults(func=cmd_cache)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except DataFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
