"""Training-free transformer inference with repositionable, prunable KV caches.

Pieces: rotary-embedding math (rope), a minimal decoder-only transformer with
explicit caches (model), offline query-independent cache construction and
persistence (cache_store), BM25 retrieval (retrieval), the position-planning
and pruning pipeline (focus), and a CLI plus benchmark harness (cli).
"""

from .cache_store import (
    CacheStore,
    CacheStoreEntry,
    PrefixCacheEntry,
    StaleCacheError,
    build_document_cache,
    build_prefix_cache,
)
from .focus import (
    AllocationPlan,
    Pipeline,
    PruningSchedule,
    PruningState,
    compute_n_reuse,
    final_reposition,
    plan_positions,
    prefill_with_pruning,
    run_full_context,
)
from .model import (
    AttentionMap,
    CapacityError,
    CostMeter,
    KVCache,
    LayerCache,
    Model,
    ModelConfig,
    attention,
    make_config,
)
from .retrieval import InvertedIndex, index_corpus, load_index, save_index, search
from .rope import PositionedVector, RopeConfig, apply_rope, reposition, rotation_angle
from .tokenizer import ByteTokenizer

__version__ = "0.1.0"

__all__ = [
    "AllocationPlan",
    "AttentionMap",
    "ByteTokenizer",
    "CacheStore",
    "CacheStoreEntry",
    "CapacityError",
    "CostMeter",
    "InvertedIndex",
    "KVCache",
    "LayerCache",
    "Model",
    "ModelConfig",
    "Pipeline",
    "PositionedVector",
    "PrefixCacheEntry",
    "PruningSchedule",
    "PruningState",
    "RopeConfig",
    "StaleCacheError",
    "apply_rope",
    "attention",
    "build_document_cache",
    "build_prefix_cache",
    "compute_n_reuse",
    "final_reposition",
    "index_corpus",
    "load_index",
    "make_config",
    "plan_positions",
    "prefill_with_pruning",
    "reposition",
    "rotation_angle",
    "run_full_context",
    "save_index",
    "search",
    "__version__",
]
