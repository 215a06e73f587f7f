"""chunkkv: chunk-wise KV prefilling with attention-guided selective recomputation."""

from .cache import (
    AssembledCache,
    ChunkKV,
    FidelityReport,
    PromptKV,
    Provenance,
    assemble,
    cache_fidelity,
    decode_view,
    full_prefill,
    load_cache,
    prefill_chunk,
    replace_entries,
    save_cache,
)
from .costmodel import (
    CostModelParams,
    SimReport,
    comm_volume_bytes,
    estimate_ttft,
    run_parallel_prefill,
    simulate,
)
from .errors import ChunkKVError, ConfigurationError, DataFormatError
from .harness import (
    GeneratedTask,
    RecordWriter,
    RunRecord,
    SyntheticTask,
    generate_task,
    needle_qk_weights,
    replay_record,
    report_similarity,
    run_pipeline,
    sweep_budget,
    sweep_geometry,
    toy_config,
)
from .model import (
    ForwardRequest,
    ForwardResult,
    ModelConfig,
    Weights,
    apply_rope,
    forward,
    init_weights,
    load_weights,
    save_weights,
)
from .positions import (
    ChunkSpec,
    GeometryConfig,
    GeometryMode,
    PositionAssignment,
    RopeSimilarity,
    assign_positions,
    rope_position_vector,
    rope_similarity_stats,
)
from .recompute import (
    OverheadReport,
    RecomputePlan,
    make_plan,
    measure_overhead,
    recompute_selected,
)
from .reorder import ReorderPlan, reorder_and_reselect, score_chunks
from .selection import (
    SelectionConfig,
    SelectionResult,
    Strategy,
    run_selection,
    score_attention_norm,
    score_cacheblend,
    score_from_attention,
    select_epic,
    select_random,
    select_topk,
)

__version__ = "0.1.0"
