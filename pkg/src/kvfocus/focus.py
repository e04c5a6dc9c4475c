"""The cache-focused inference pipeline.

Given a query, the pipeline retrieves document caches, plans where their keys
sit inside the model's positional encoding range, runs the query through the
layers while accumulating per-document attention mass and pruning the weakest
caches on a fixed layer schedule, compacts the survivors next to the query,
and hands the assembled cache to greedy decoding.

Position planning: with usable capacity for C caches of length l each, k
caches need ceil(k / C) groups; groups reuse the identical position range
(parallel windows) while caches within a group sit sequentially. Ranks are
dealt round-robin over groups so every reused range carries a similar
relevance profile.

Pruning: document scores start at zero and accumulate layer by layer; at
every interval-th layer the lowest-scoring caches are dropped. The per-event
removal count is (k - k_finish) divided by the number of events, floored,
with the final event trimmed or extended so exactly k_finish caches remain.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .cache_store import CacheStore, CacheStoreEntry, PrefixCacheEntry, passage_tokens
from .model import (
    PREFIX_SEGMENT,
    QUERY_SEGMENT,
    AttentionMap,
    CostMeter,
    KVCache,
    LayerCache,
    Model,
)
from .retrieval import InvertedIndex, search
from .rope import RopeConfig, reposition_array
from .tokenizer import ByteTokenizer

STRATEGIES = ("none", "align", "sort")


class ConfigurationError(ValueError):
    """A layout or schedule cannot be satisfied by the configuration."""


def compute_n_reuse(k: int, max_position: int, cache_len: int, prefix_len: int = 0,
                    reserve: int = 0) -> int:
    """Smallest number of position-range groups that fit k caches.

    Capacity counts whole cache slots in the usable range, i.e. max_position
    minus the prefix and a reserved query/generation budget.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if cache_len < 1:
        raise ValueError(f"cache_len must be >= 1, got {cache_len}")
    capacity = (max_position - prefix_len - reserve) // cache_len
    if capacity < 1:
        raise ConfigurationError(
            f"cache length {cache_len} does not fit the usable range "
            f"({max_position} - prefix {prefix_len} - reserve {reserve})"
        )
    return -(-k // capacity)  # ceil


@dataclass(frozen=True)
class PlanSlot:
    group: int
    slot: int
    start: int


@dataclass
class AllocationPlan:
    """Assignment of each cache id to a (group, slot) position range.

    Groups share the identical position range; slots within a group are
    sequential. Insertion order of `slots` is retrieval-rank order.
    """

    slots: dict[str, PlanSlot]
    n_reuse: int
    cache_len: int
    prefix_len: int

    @property
    def slots_per_group(self) -> int:
        if not self.slots:
            return 0
        return max(s.slot for s in self.slots.values()) + 1

    @property
    def end(self) -> int:
        """First position after the deepest slot (where the query starts)."""
        return self.prefix_len + self.slots_per_group * self.cache_len

    @property
    def fully_parallel(self) -> bool:
        """True for the everything-in-one-window layout (n_reuse == k)."""
        return bool(self.slots) and self.n_reuse == len(self.slots)

    def positions(self, cache_id: str) -> np.ndarray:
        start = self.slots[cache_id].start
        return np.arange(start, start + self.cache_len, dtype=np.int64)

    def validate(self, max_position: int) -> None:
        for cache_id, slot in self.slots.items():
            if slot.start + self.cache_len > max_position:
                raise ConfigurationError(
                    f"cache {cache_id!r} at [{slot.start}, {slot.start + self.cache_len}) "
                    f"exceeds max_position {max_position}"
                )

    def to_dict(self) -> dict:
        return {
            "n_reuse": self.n_reuse,
            "cache_len": self.cache_len,
            "prefix_len": self.prefix_len,
            "slots": {
                cid: {"group": s.group, "slot": s.slot, "start": s.start}
                for cid, s in self.slots.items()
            },
        }


def plan_positions(ids_sorted: list[str], n_reuse: int, cache_len: int,
                   prefix_len: int) -> AllocationPlan:
    """Deal ids (best retrieval rank first) round-robin into n_reuse groups.

    Rank r lands in group r mod n_reuse at slot r div n_reuse, so each group
    holds a similar relevance profile and all groups share one range.
    """
    if not ids_sorted:
        raise ValueError("ids_sorted must be non-empty")
    if len(set(ids_sorted)) != len(ids_sorted):
        raise ValueError("ids_sorted contains duplicates")
    if not 1 <= n_reuse:
        raise ValueError(f"n_reuse must be >= 1, got {n_reuse}")
    slots: dict[str, PlanSlot] = {}
    for rank, cache_id in enumerate(ids_sorted):
        group, slot = rank % n_reuse, rank // n_reuse
        slots[cache_id] = PlanSlot(group=group, slot=slot,
                                   start=prefix_len + slot * cache_len)
    return AllocationPlan(slots=slots, n_reuse=n_reuse, cache_len=cache_len,
                          prefix_len=prefix_len)


@dataclass(frozen=True)
class PruningSchedule:
    """User-facing schedule knobs: prune every `interval` layers down to
    `k_finish` caches."""

    interval: int = 4
    k_finish: int = 5

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError(f"interval must be >= 1, got {self.interval}")
        if self.k_finish < 1:
            raise ValueError(f"k_finish must be >= 1, got {self.k_finish}")


def removals_per_event(k: int, k_finish: int, num_layers: int, interval: int) -> int:
    """Caches dropped at each pruning event: (k - k_finish) / (layers / interval),
    floored; the terminal event absorbs any remainder."""
    events = num_layers // interval
    if events < 1:
        raise ConfigurationError(
            f"pruning interval {interval} exceeds the layer count {num_layers}"
        )
    return max((k - k_finish) // events, 0)


@dataclass
class PruningState:
    """Survivor set, accumulated scores, and the resolved schedule."""

    surviving_ids: list[str]
    scores: dict[str, float]
    schedule: PruningSchedule
    k_prune: int
    num_events: int
    ranks: dict[str, int]
    segment_of: dict[str, int]
    events_done: int = 0
    pruned_at_layer: dict[int, list[str]] = field(default_factory=dict)

    @classmethod
    def start(cls, ids: list[str], schedule: PruningSchedule, num_layers: int) -> "PruningState":
        active = len(ids) > schedule.k_finish
        k_prune = removals_per_event(len(ids), schedule.k_finish, num_layers,
                                     schedule.interval) if active else 0
        return cls(
            surviving_ids=list(ids),
            scores={i: 0.0 for i in ids},
            schedule=schedule,
            k_prune=k_prune,
            num_events=(num_layers // schedule.interval) if active else 0,
            ranks={i: r for r, i in enumerate(ids)},
            segment_of={i: r for r, i in enumerate(ids)},
        )

    @property
    def active(self) -> bool:
        return self.num_events > 0 and len(self.surviving_ids) > self.schedule.k_finish

    def prune_event(self, layer: int) -> list[str]:
        """Drop the lowest-score caches; ties keep the better-retrieved one.

        The final event removes exactly enough to land on k_finish.
        """
        self.events_done += 1
        excess = len(self.surviving_ids) - self.schedule.k_finish
        if self.events_done >= self.num_events:
            target = excess
        else:
            target = min(self.k_prune, excess)
        if target <= 0:
            return []
        order = sorted(self.surviving_ids,
                       key=lambda i: (self.scores[i], -self.ranks[i]))
        removed = set(order[:target])
        self.surviving_ids = [i for i in self.surviving_ids if i not in removed]
        self.pruned_at_layer[layer] = [i for i in order[:target]]
        return self.pruned_at_layer[layer]


def accumulate_scores(attention_map: AttentionMap, state: PruningState) -> PruningState:
    """Add each surviving document's mean attention mass to its score.

    The increment is the softmax mass landing on the document's key columns,
    summed per row and averaged over heads and query rows, so long queries do
    not dominate. Only surviving ids are scored.
    """
    weights = attention_map.weights.astype(np.float64)
    col_segments = attention_map.col_segments
    for cache_id in state.surviving_ids:
        cols = col_segments == state.segment_of[cache_id]
        if cols.any():
            state.scores[cache_id] += float(weights[:, :, cols].sum(axis=2).mean())
    return state


def _repositioned_layers(rope: RopeConfig, entry: CacheStoreEntry, positions: np.ndarray):
    """Per-layer (keys, values) float32 with keys moved to target positions."""
    out = []
    for layer in entry.kv.layers:
        keys = reposition_array(rope, layer.keys, layer.position_ids, positions)
        out.append((keys, layer.values))
    return out


@dataclass
class PrefillResult:
    """What the pruning prefill hands to final repositioning and decoding."""

    query_keys: list[np.ndarray]      # per layer (heads, q, head_dim) float32
    query_values: list[np.ndarray]
    query_positions: np.ndarray
    surviving_ids: list[str]
    scores: dict[str, float]
    logits: np.ndarray                # (q, vocab) from the final layer
    state: PruningState
    per_layer_scores: list[dict[str, float]]
    attention_maps: list[AttentionMap] | None = None

    @property
    def first_token(self) -> int:
        return int(np.argmax(self.logits[-1]))


def prefill_with_pruning(
    model: Model,
    prefix: PrefixCacheEntry,
    entries: list[CacheStoreEntry],
    query_tokens,
    schedule: PruningSchedule | None,
    plan: AllocationPlan,
    *,
    meter: CostMeter | None = None,
    keep_maps: bool = False,
) -> PrefillResult:
    """Layer-by-layer query pass over [prefix] + [surviving document caches].

    Per layer: reposition the stored caches to their planned ranges, attend,
    accumulate per-document attention mass, and at every interval-th layer
    drop the weakest caches. With k <= k_finish (or schedule None) pruning is
    disabled and the pass only accumulates scores. Returns the query's own
    per-layer KV, the survivor set, and the score trajectory.
    """
    cfg = model.config
    query_tokens = np.asarray(query_tokens, dtype=np.int64)
    if query_tokens.size == 0:
        raise ValueError("query tokens must be non-empty")
    for entry in entries:
        if entry.prefix_hash != prefix.prefix_hash:
            raise ValueError(f"entry {entry.doc_id!r} was built against a different prefix")
        if entry.model_fingerprint != model.fingerprint:
            raise ValueError(f"entry {entry.doc_id!r} was built with a different model")
        if entry.doc_id not in plan.slots:
            raise ValueError(f"plan does not cover cache id {entry.doc_id!r}")

    ids = [e.doc_id for e in entries]
    state = PruningState.start(ids, schedule or PruningSchedule(k_finish=max(len(ids), 1)),
                               cfg.num_layers)
    pruning = schedule is not None and len(ids) > state.schedule.k_finish
    if not pruning:
        state.num_events = 0

    repositioned = {
        e.doc_id: _repositioned_layers(cfg.rope, e, plan.positions(e.doc_id))
        for e in entries
    }
    doc_meta = {
        e.doc_id: (
            plan.positions(e.doc_id),
            np.full(e.token_count, state.segment_of[e.doc_id], dtype=np.int64),
            np.arange(e.token_count) < e.valid_len,
        )
        for e in entries
    }

    query_start = plan.end if ids else plan.prefix_len
    query_positions = np.arange(query_start, query_start + query_tokens.size, dtype=np.int64)

    hidden = model.embed(query_tokens)
    query_keys: list[np.ndarray] = []
    query_values: list[np.ndarray] = []
    per_layer_scores: list[dict[str, float]] = []
    kept_maps: list[AttentionMap] = []

    for layer_index in range(cfg.num_layers):
        parts_k = [prefix.kv.layers[layer_index].keys]
        parts_v = [prefix.kv.layers[layer_index].values]
        parts_pos = [prefix.kv.layers[layer_index].position_ids]
        parts_seg = [prefix.kv.layers[layer_index].segment_ids]
        parts_vis = [prefix.kv.layers[layer_index].visible]
        for cache_id in state.surviving_ids:
            keys, values = repositioned[cache_id][layer_index]
            positions, segments, visible = doc_meta[cache_id]
            parts_k.append(keys)
            parts_v.append(values)
            parts_pos.append(positions)
            parts_seg.append(segments)
            parts_vis.append(visible)
        ctx = LayerCache(
            keys=np.concatenate(parts_k, axis=1),
            values=np.concatenate(parts_v, axis=1),
            position_ids=np.concatenate(parts_pos),
            segment_ids=np.concatenate(parts_seg),
            visible=np.concatenate(parts_vis),
        )
        hidden, k32, v32, amap = model.forward_layer(
            layer_index,
            hidden,
            ctx,
            query_positions,
            segments=np.full(query_tokens.size, QUERY_SEGMENT, dtype=np.int64),
            meter=meter,
            collect_map=True,
            append=False,
        )
        query_keys.append(k32)
        query_values.append(v32)
        if keep_maps:
            kept_maps.append(amap)
        accumulate_scores(amap, state)
        per_layer_scores.append(dict(state.scores))
        if pruning and state.active and (layer_index + 1) % state.schedule.interval == 0:
            state.prune_event(layer_index + 1)

    if pruning and len(state.surviving_ids) != state.schedule.k_finish:
        raise AssertionError(
            f"pruning ended with {len(state.surviving_ids)} caches, "
            f"expected {state.schedule.k_finish}"
        )

    return PrefillResult(
        query_keys=query_keys,
        query_values=query_values,
        query_positions=query_positions,
        surviving_ids=list(state.surviving_ids),
        scores=dict(state.scores),
        logits=model.logits(hidden),
        state=state,
        per_layer_scores=per_layer_scores,
        attention_maps=kept_maps if keep_maps else None,
    )


def final_reposition(
    rope: RopeConfig,
    prefix: PrefixCacheEntry,
    entries: list[CacheStoreEntry],
    prefill: PrefillResult,
    strategy: str,
    plan: AllocationPlan,
) -> KVCache:
    """Assemble the decode-ready cache: prefix, surviving caches, query KV.

    align compacts survivors into a contiguous block just before the query,
    keeping their current order; sort orders the block by ascending
    accumulated score so the strongest cache sits adjacent to the query
    (ties fall back to retrieval rank); none keeps the phase-1 layout,
    gaps included. The query's cached keys are repositioned the same way,
    never recomputed.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    entries = [e for e in entries if e.doc_id in set(prefill.surviving_ids)]
    order = {i: r for r, i in enumerate(prefill.surviving_ids)}
    entries = sorted(entries, key=lambda e: order[e.doc_id])

    if strategy == "none":
        targets = {e.doc_id: plan.positions(e.doc_id) for e in entries}
        query_positions = prefill.query_positions
    else:
        if strategy == "sort":
            if not prefill.scores:
                raise ValueError("sort strategy requires accumulated scores")
            ranks = prefill.state.ranks
            placed = sorted(entries,
                            key=lambda e: (prefill.scores[e.doc_id], -ranks[e.doc_id]))
        else:
            placed = entries  # align: keep current relative order
        targets = {}
        cursor = plan.prefix_len
        for entry in placed:
            targets[entry.doc_id] = np.arange(cursor, cursor + entry.token_count,
                                              dtype=np.int64)
            cursor += entry.token_count
        query_positions = np.arange(cursor, cursor + prefill.query_positions.size,
                                    dtype=np.int64)

    num_layers = len(prefix.kv.layers)
    layers: list[LayerCache] = []
    q_len = prefill.query_positions.size
    for layer_index in range(num_layers):
        parts_k = [prefix.kv.layers[layer_index].keys]
        parts_v = [prefix.kv.layers[layer_index].values]
        parts_pos = [prefix.kv.layers[layer_index].position_ids]
        parts_seg = [prefix.kv.layers[layer_index].segment_ids]
        parts_vis = [prefix.kv.layers[layer_index].visible]
        for entry in entries:
            layer = entry.kv.layers[layer_index]
            target = targets[entry.doc_id]
            parts_k.append(reposition_array(rope, layer.keys, layer.position_ids, target))
            parts_v.append(layer.values)
            parts_pos.append(target)
            parts_seg.append(np.full(entry.token_count,
                                     prefill.state.segment_of[entry.doc_id], dtype=np.int64))
            parts_vis.append(np.arange(entry.token_count) < entry.valid_len)
        parts_k.append(reposition_array(rope, prefill.query_keys[layer_index],
                                        prefill.query_positions, query_positions))
        parts_v.append(prefill.query_values[layer_index])
        parts_pos.append(query_positions)
        parts_seg.append(np.full(q_len, QUERY_SEGMENT, dtype=np.int64))
        parts_vis.append(np.ones(q_len, dtype=bool))
        layers.append(LayerCache(
            keys=np.concatenate(parts_k, axis=1),
            values=np.concatenate(parts_v, axis=1),
            position_ids=np.concatenate(parts_pos),
            segment_ids=np.concatenate(parts_seg),
            visible=np.concatenate(parts_vis),
        ))
    return KVCache(layers)


@dataclass
class PipelineTrace:
    query: str
    retrieved_ids: list[str]
    n_reuse: int
    plan: dict
    per_layer_scores: list[dict[str, float]]
    pruned_at_layer: dict[int, list[str]]
    final_ids: list[str]
    strategy: str
    timings: dict[str, float]
    op_counts: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "retrieved_ids": self.retrieved_ids,
            "n_reuse": self.n_reuse,
            "plan": self.plan,
            "per_layer_scores": self.per_layer_scores,
            "pruned_at_layer": {str(k): v for k, v in self.pruned_at_layer.items()},
            "final_ids": self.final_ids,
            "strategy": self.strategy,
            "timings": self.timings,
            "op_counts": self.op_counts,
        }


@dataclass
class PipelineResult:
    text: str
    tokens: list[int]
    trace: PipelineTrace


class Pipeline:
    """Retrieve, load caches, plan positions, prune while pre-filling, decode.

    One run owns its PruningState and cache assemblies exclusively; the
    store, index, and model are shared read-only, so independent runs may
    proceed concurrently.
    """

    def __init__(self, model: Model, store: CacheStore, index: InvertedIndex,
                 *, tokenizer: ByteTokenizer | None = None, query_reserve: int = 128):
        self.model = model
        self.store = store
        self.index = index
        self.tokenizer = tokenizer or ByteTokenizer()
        self.query_reserve = query_reserve

    def run(self, query_text: str, k: int, *, schedule: PruningSchedule | None = None,
            strategy: str = "none", gen_tokens: int = 20, stop_token: int | None = None,
            meter: CostMeter | None = None) -> PipelineResult:
        """End-to-end run; k=0 answers from the prefix and query alone."""
        retrieved = search(self.index, query_text, k) if k > 0 else []
        entries = [self.store.load_entry(doc_id) for doc_id, _ in retrieved]
        return self.run_with_entries(query_text, entries,
                                     retrieved_ids=[d for d, _ in retrieved],
                                     schedule=schedule, strategy=strategy,
                                     gen_tokens=gen_tokens, stop_token=stop_token,
                                     meter=meter)

    def run_with_entries(self, query_text: str, entries: list[CacheStoreEntry], *,
                         retrieved_ids: list[str] | None = None,
                         schedule: PruningSchedule | None = None, strategy: str = "none",
                         gen_tokens: int = 20, stop_token: int | None = None,
                         meter: CostMeter | None = None,
                         prefix: PrefixCacheEntry | None = None) -> PipelineResult:
        """The pipeline on explicit entries (used when caches are built online)."""
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
        if gen_tokens < 1:
            raise ValueError("gen_tokens must be >= 1")
        meter = meter if meter is not None else CostMeter()
        meter.phase = "prefill"
        t0 = time.perf_counter()

        prefix = prefix if prefix is not None else self.store.load_prefix()
        query_tokens = self.tokenizer.encode(query_text)
        cfg = self.model.config

        if entries:
            lengths = {e.token_count for e in entries}
            if len(lengths) > 1:
                raise ValueError(f"entries disagree on passage length: {sorted(lengths)}")
            cache_len = entries[0].token_count
            n_reuse = compute_n_reuse(len(entries), cfg.rope.max_position, cache_len,
                                      prefix_len=prefix.token_count,
                                      reserve=self.query_reserve)
            plan = plan_positions([e.doc_id for e in entries], n_reuse, cache_len,
                                  prefix.token_count)
            plan.validate(cfg.rope.max_position)
        else:
            n_reuse = 0
            plan = AllocationPlan(slots={}, n_reuse=0, cache_len=0,
                                  prefix_len=prefix.token_count)
        if len(query_tokens) + gen_tokens > self.query_reserve:
            warnings.warn(
                f"query plus generation ({len(query_tokens)} + {gen_tokens}) exceeds the "
                f"reserved budget of {self.query_reserve}; positions may extrapolate",
                stacklevel=2,
            )

        prefill = prefill_with_pruning(self.model, prefix, entries, query_tokens,
                                       schedule, plan, meter=meter)
        survivors = [e for e in entries if e.doc_id in set(prefill.surviving_ids)]
        cache = final_reposition(cfg.rope, prefix, survivors, prefill, strategy, plan)
        first = prefill.first_token
        t1 = time.perf_counter()

        meter.phase = "decode"
        tokens = [first]
        if stop_token is None or first != stop_token:
            tokens += self.model.decode(cache, first, gen_tokens - 1,
                                        stop_token=stop_token, meter=meter)
        t2 = time.perf_counter()

        trace = PipelineTrace(
            query=query_text,
            retrieved_ids=retrieved_ids if retrieved_ids is not None
            else [e.doc_id for e in entries],
            n_reuse=n_reuse,
            plan=plan.to_dict(),
            per_layer_scores=prefill.per_layer_scores,
            pruned_at_layer=prefill.state.pruned_at_layer,
            final_ids=list(prefill.surviving_ids),
            strategy=strategy,
            timings={"prefill_s": t1 - t0, "decode_s": t2 - t1, "total_s": t2 - t0},
            op_counts={"prefill_mults": meter.prefill_mults,
                       "decode_mults": meter.decode_mults},
        )
        return PipelineResult(text=self.tokenizer.decode(tokens), tokens=tokens, trace=trace)


def run_full_context(model: Model, prefix_tokens, passages, query_tokens, *,
                     gen_tokens: int = 20, stop_token: int | None = None,
                     meter: CostMeter | None = None):
    """Uncached comparison path: one monolithic forward over
    prefix + fixed-length passages + query, then greedy decoding.

    passages: list of (tokens, valid_len) pairs, already padded to the fixed
    passage length; padding keys are masked exactly as in the cached path.
    Returns (tokens, context_length, timings).
    """
    if gen_tokens < 1:
        raise ValueError("gen_tokens must be >= 1")
    meter = meter if meter is not None else CostMeter()
    meter.phase = "prefill"
    t0 = time.perf_counter()
    tokens = [int(t) for t in prefix_tokens]
    segments = [PREFIX_SEGMENT] * len(tokens)
    visible = [True] * len(tokens)
    for seg, (doc_tokens, valid_len) in enumerate(passages):
        tokens += [int(t) for t in doc_tokens]
        segments += [seg] * len(doc_tokens)
        visible += [i < valid_len for i in range(len(doc_tokens))]
    query = [int(t) for t in query_tokens]
    tokens += query
    segments += [QUERY_SEGMENT] * len(query)
    visible += [True] * len(query)

    cache = model.new_cache()
    first, cache = model.prefill(
        cache,
        tokens,
        positions=np.arange(len(tokens)),
        segments=np.asarray(segments, dtype=np.int64),
        visible=np.asarray(visible, dtype=bool),
        meter=meter,
    )
    t1 = time.perf_counter()
    meter.phase = "decode"
    out = [first]
    if stop_token is None or first != stop_token:
        out += model.decode(cache, first, gen_tokens - 1, stop_token=stop_token, meter=meter)
    t2 = time.perf_counter()
    timings = {"prefill_s": t1 - t0, "decode_s": t2 - t1, "total_s": t2 - t0}
    return out, len(tokens), timings
