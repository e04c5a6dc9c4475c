"""Pipeline mechanics: grouping arithmetic, pruning, allocation, identity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvfocus.cache_store import (
    CacheStore,
    CacheStoreEntry,
    build_document_cache,
    build_prefix_cache,
    passage_tokens,
)
from kvfocus.focus import (
    AllocationPlan,
    ConfigurationError,
    Pipeline,
    PruningSchedule,
    PruningState,
    accumulate_scores,
    compute_n_reuse,
    final_reposition,
    plan_positions,
    prefill_with_pruning,
    removals_per_event,
    run_full_context,
)
from kvfocus.model import QUERY_SEGMENT, AttentionMap, KVCache, LayerCache, Model, make_config
from kvfocus.retrieval import index_corpus
from kvfocus.rope import reposition_array, rotate
from kvfocus.tokenizer import ByteTokenizer


def small_model(seed=0, **overrides):
    defaults = dict(num_layers=4, num_heads=2, head_dim=8, max_position=256, vocab_size=300)
    defaults.update(overrides)
    return Model.from_seed(make_config(**defaults), seed)


def brute_force_group_count(k, capacity):
    """Oracle: smallest group count whose per-group slot need fits capacity."""
    for groups in range(1, k + 1):
        per_group = -(-k // groups)
        if per_group <= capacity:
            return groups
    return k


class TestComputeNReuse:
    def test_everything_fits_once(self):
        # capacity 16 slots, 5 caches
        assert compute_n_reuse(5, 16 * 8, cache_len=8) == 1

    def test_paper_style_arithmetic(self):
        assert compute_n_reuse(20, 4096, cache_len=256) == 2
        assert compute_n_reuse(40, 8 * 64, cache_len=64) == 5

    def test_prefix_and_reserve_shrink_capacity(self):
        assert compute_n_reuse(4, 100, cache_len=20, prefix_len=0, reserve=0) == 1
        assert compute_n_reuse(4, 100, cache_len=20, prefix_len=10, reserve=55) == 4

    def test_cache_longer_than_usable_range_rejected(self):
        with pytest.raises(ConfigurationError):
            compute_n_reuse(2, 64, cache_len=60, prefix_len=10)

    @given(k=st.integers(1, 200), capacity=st.integers(1, 32))
    @settings(max_examples=120, deadline=None)
    def test_matches_brute_force_packing(self, k, capacity):
        max_position = capacity * 8
        assert compute_n_reuse(k, max_position, cache_len=8) == brute_force_group_count(k, capacity)


class TestPlanPositions:
    def test_single_group_is_sequential(self):
        plan = plan_positions(["a", "b", "c"], 1, cache_len=10, prefix_len=5)
        assert [plan.slots[i].start for i in "abc"] == [5, 15, 25]
        assert plan.end == 35
        assert not plan.fully_parallel

    def test_one_group_per_cache_is_parallel_windows(self):
        plan = plan_positions(["a", "b", "c"], 3, cache_len=10, prefix_len=0)
        assert {plan.slots[i].start for i in "abc"} == {0}
        assert plan.fully_parallel
        assert plan.end == 10

    def test_round_robin_dealing(self):
        plan = plan_positions(["r0", "r1", "r2", "r3"], 2, cache_len=4, prefix_len=0)
        assert (plan.slots["r0"].group, plan.slots["r0"].slot) == (0, 0)
        assert (plan.slots["r1"].group, plan.slots["r1"].slot) == (1, 0)
        assert (plan.slots["r2"].group, plan.slots["r2"].slot) == (0, 1)
        assert (plan.slots["r3"].group, plan.slots["r3"].slot) == (1, 1)
        assert plan.slots["r0"].start == plan.slots["r1"].start == 0
        assert plan.slots["r2"].start == plan.slots["r3"].start == 4

    def test_every_id_exactly_once_and_groups_non_overlapping(self):
        ids = [f"c{i}" for i in range(11)]
        plan = plan_positions(ids, 3, cache_len=6, prefix_len=2)
        assert sorted(plan.slots) == sorted(ids)
        by_group: dict[int, list[int]] = {}
        for slot in plan.slots.values():
            by_group.setdefault(slot.group, []).append(slot.start)
        for starts in by_group.values():
            starts.sort()
            for a, b in zip(starts, starts[1:]):
                assert b - a >= 6  # sequential, non-overlapping within a group

    def test_validate_catches_overflow(self):
        plan = plan_positions(["a", "b"], 1, cache_len=32, prefix_len=0)
        with pytest.raises(ConfigurationError):
            plan.validate(48)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            plan_positions(["a", "a"], 1, 4, 0)


class TestPruningSchedule:
    def test_worked_example_removal_count(self):
        # 28 layers, every 4th, 40 -> 5 gives 5 removals across 7 events
        assert removals_per_event(40, 5, num_layers=28, interval=4) == 5

    def test_interval_beyond_layers_rejected(self):
        with pytest.raises(ConfigurationError):
            removals_per_event(10, 2, num_layers=3, interval=4)

    def test_state_runs_worked_example(self):
        ids = [f"d{i}" for i in range(40)]
        state = PruningState.start(ids, PruningSchedule(interval=4, k_finish=5), 28)
        assert state.k_prune == 5 and state.num_events == 7
        rng = np.random.default_rng(0)
        for i in ids:
            state.scores[i] = float(rng.random())
        events = 0
        for layer in range(1, 29):
            if state.active and layer % 4 == 0:
                state.prune_event(layer)
                events += 1
        assert events == 7
        assert len(state.surviving_ids) == 5
        assert all(len(v) == 5 for v in state.pruned_at_layer.values())

    def test_no_pruning_when_k_at_target(self):
        state = PruningState.start(["a", "b"], PruningSchedule(interval=2, k_finish=2), 8)
        assert not state.active

    def test_nested_and_exact_terminal_count(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            k = int(rng.integers(2, 30))
            k_finish = int(rng.integers(1, k))
            interval = int(rng.integers(1, 5))
            layers = int(rng.integers(interval, 12))
            state = PruningState.start([f"d{i}" for i in range(k)],
                                       PruningSchedule(interval=interval, k_finish=k_finish),
                                       layers)
            for i in state.surviving_ids:
                state.scores[i] = float(rng.random())
            previous = set(state.surviving_ids)
            for layer in range(1, layers + 1):
                if state.active and layer % interval == 0:
                    state.prune_event(layer)
                    current = set(state.surviving_ids)
                    assert current <= previous  # monotone shrinking
                    previous = current
            assert len(state.surviving_ids) == k_finish

    def test_tie_break_keeps_better_retrieval_rank(self):
        state = PruningState.start(["best", "mid", "worst"],
                                   PruningSchedule(interval=1, k_finish=1), 2)
        # identical scores: the worse-ranked documents go first
        removed = state.prune_event(1)
        assert removed == ["worst"]
        removed = state.prune_event(2)
        assert removed == ["mid"]
        assert state.surviving_ids == ["best"]


class TestAccumulateScores:
    def make_state(self, ids):
        return PruningState.start(ids, PruningSchedule(interval=4, k_finish=len(ids)), 8)

    def test_all_mass_on_prefix_scores_zero(self):
        state = self.make_state(["a", "b"])
        weights = np.zeros((2, 3, 4), dtype=np.float32)
        weights[:, :, 0] = 1.0  # everything on a prefix column
        amap = AttentionMap(weights, np.array([-1, 0, 0, 1]))
        accumulate_scores(amap, state)
        assert state.scores == {"a": 0.0, "b": 0.0}

    def test_single_document_mass_definition(self):
        state = self.make_state(["a"])
        weights = np.zeros((1, 2, 3), dtype=np.float32)
        weights[0, 0] = [0.5, 0.3, 0.2]
        weights[0, 1] = [0.1, 0.8, 0.1]
        amap = AttentionMap(weights, np.array([-1, 0, -2]))
        accumulate_scores(amap, state)
        # mean over rows of the mass on document columns: (0.3 + 0.8) / 2
        assert state.scores["a"] == pytest.approx(0.55, abs=1e-6)

    def test_symmetric_documents_score_equally(self):
        model = small_model(seed=9)
        prefix = build_prefix_cache(model, [1, 2])
        doc = build_document_cache(model, prefix, [7, 8, 9], doc_id="a")
        twin = CacheStoreEntry(doc_id="b", model_fingerprint=doc.model_fingerprint,
                               prefix_hash=doc.prefix_hash, prefix_len=doc.prefix_len,
                               token_count=doc.token_count, valid_len=doc.valid_len,
                               kv=doc.kv.copy())
        plan = plan_positions(["a", "b"], 2, cache_len=3, prefix_len=2)  # shared range
        result = prefill_with_pruning(model, prefix, [doc, twin], [5, 6], None, plan)
        assert result.scores["a"] == pytest.approx(result.scores["b"], abs=1e-5)


def synthetic_entry(model, prefix, doc_id, keys_fn, token_count=8):
    """Hand-built cache entry with controlled key vectors and zero values."""
    cfg = model.config
    p = prefix.token_count
    layers = []
    for _ in range(cfg.num_layers):
        keys = keys_fn().astype(np.float32)
        layers.append(LayerCache(
            keys=keys,
            values=np.zeros_like(keys),
            position_ids=np.arange(p, p + token_count, dtype=np.int64),
            segment_ids=np.zeros(token_count, dtype=np.int64),
            visible=np.ones(token_count, dtype=bool),
        ))
    return CacheStoreEntry(doc_id=doc_id, model_fingerprint=model.fingerprint,
                           prefix_hash=prefix.prefix_hash, prefix_len=p,
                           token_count=token_count, valid_len=token_count,
                           kv=KVCache(layers))


def basis_spike_keys(num_heads, token_count, head_dim, magnitude):
    """Keys covering +/- every basis direction: any query hits one strongly."""
    keys = np.zeros((num_heads, token_count, head_dim), dtype=np.float32)
    for t in range(token_count):
        direction = (t // 2) % head_dim
        sign = 1.0 if t % 2 == 0 else -1.0
        keys[:, t, direction] = sign * magnitude
    return keys


class TestPruningBehavior:
    def test_zero_attention_document_pruned_first(self):
        model = small_model(seed=3)
        prefix = build_prefix_cache(model, [1, 2])
        dead = synthetic_entry(model, prefix, "dead", lambda: np.zeros((2, 8, 8)))
        live = synthetic_entry(
            model, prefix, "live", lambda: basis_spike_keys(2, 8, 8, 1e4))
        decoy = synthetic_entry(
            model, prefix, "decoy", lambda: basis_spike_keys(2, 8, 8, 1e4))
        plan = plan_positions(["dead", "live", "decoy"], 1, cache_len=8, prefix_len=2)
        result = prefill_with_pruning(model, prefix, [dead, live, decoy], [40, 41, 42],
                                      PruningSchedule(interval=2, k_finish=1), plan)
        first_pruned = result.state.pruned_at_layer[min(result.state.pruned_at_layer)]
        assert first_pruned[0] == "dead"
        assert "dead" not in result.surviving_ids

    def test_disabled_schedule_keeps_everything(self):
        model = small_model(seed=5)
        prefix = build_prefix_cache(model, [1])
        docs = [build_document_cache(model, prefix, [10 + i, 20 + i], doc_id=f"d{i}")
                for i in range(3)]
        plan = plan_positions([d.doc_id for d in docs], 1, cache_len=2, prefix_len=1)
        result = prefill_with_pruning(model, prefix, docs, [5, 6],
                                      PruningSchedule(interval=2, k_finish=3), plan)
        assert result.surviving_ids == ["d0", "d1", "d2"]
        assert result.state.pruned_at_layer == {}

    def test_scores_recomputable_from_stored_maps(self):
        """Final S equals document masses re-derived from the raw attention
        maps by an independent summation."""
        model = small_model(seed=21)
        prefix = build_prefix_cache(model, [1, 2])
        docs = [build_document_cache(model, prefix, [60 + i, 70 + i, 80 + i], doc_id=f"d{i}")
                for i in range(3)]
        plan = plan_positions([d.doc_id for d in docs], 1, cache_len=3, prefix_len=2)
        result = prefill_with_pruning(model, prefix, docs, [5, 6, 7], None, plan,
                                      keep_maps=True)
        for doc_id in result.scores:
            seg = result.state.segment_of[doc_id]
            recomputed = 0.0
            for amap in result.attention_maps:
                mass = 0.0
                heads, rows, _ = amap.weights.shape
                for h in range(heads):
                    for r in range(rows):
                        for c in np.nonzero(amap.col_segments == seg)[0]:
                            mass += float(amap.weights[h, r, c])
                recomputed += mass / (heads * rows)
            assert result.scores[doc_id] == pytest.approx(recomputed, abs=1e-5)

    def test_reposition_equivalence_through_attention(self):
        """Attention logits against a repositioned cache equal logits against
        keys freshly rotated at the target positions (rope oracle, full layer)."""
        model = small_model(seed=22)
        prefix = build_prefix_cache(model, [1, 2])
        doc = build_document_cache(model, prefix, [9, 10, 11, 12], doc_id="d")
        layer = doc.kv.layers[0]
        old = layer.position_ids
        target = np.arange(40, 44)
        moved = reposition_array(model.config.rope, layer.keys, old, target)
        unrotated = reposition_array(model.config.rope, layer.keys, old,
                                     np.zeros_like(old))
        fresh = rotate(model.config.rope, unrotated, target)
        rng = np.random.default_rng(0)
        q = rng.standard_normal((2, 3, 8))
        logits_moved = np.matmul(q, moved.astype(np.float64).transpose(0, 2, 1))
        logits_fresh = np.matmul(q, fresh.astype(np.float64).transpose(0, 2, 1))
        np.testing.assert_allclose(logits_moved, logits_fresh, atol=1e-5)

    def test_per_layer_scores_monotone_nondecreasing(self):
        model = small_model(seed=6)
        prefix = build_prefix_cache(model, [1, 2])
        docs = [build_document_cache(model, prefix, [30 + i, 40 + i, 50 + i], doc_id=f"d{i}")
                for i in range(4)]
        plan = plan_positions([d.doc_id for d in docs], 2, cache_len=3, prefix_len=2)
        result = prefill_with_pruning(model, prefix, docs, [7, 8, 9], None, plan)
        for earlier, later in zip(result.per_layer_scores, result.per_layer_scores[1:]):
            for doc_id, score in earlier.items():
                assert later[doc_id] >= score - 1e-9


class TestFinalReposition:
    def run_prefill(self, model, prefix, docs, plan, schedule=None):
        return prefill_with_pruning(model, prefix, docs, [60, 61], schedule, plan)

    def make_docs(self, model, prefix, n):
        return [build_document_cache(model, prefix, [100 + 2 * i, 101 + 2 * i], doc_id=f"d{i}")
                for i in range(n)]

    def test_single_survivor_align_equals_sort(self):
        model = small_model(seed=7)
        prefix = build_prefix_cache(model, [1, 2, 3])
        docs = self.make_docs(model, prefix, 1)
        plan = plan_positions(["d0"], 1, cache_len=2, prefix_len=3)
        prefill = self.run_prefill(model, prefix, docs, plan)
        a = final_reposition(model.config.rope, prefix, docs, prefill, "align", plan)
        b = final_reposition(model.config.rope, prefix, docs, prefill, "sort", plan)
        for la, lb in zip(a.layers, b.layers):
            np.testing.assert_array_equal(la.keys, lb.keys)
            np.testing.assert_array_equal(la.position_ids, lb.position_ids)

    def test_sort_places_high_score_next_to_query(self):
        model = small_model(seed=8)
        prefix = build_prefix_cache(model, [1, 2])
        docs = self.make_docs(model, prefix, 2)
        plan = plan_positions(["d0", "d1"], 1, cache_len=2, prefix_len=2)
        prefill = self.run_prefill(model, prefix, docs, plan)
        prefill.scores["d0"] = 0.1
        prefill.scores["d1"] = 0.9
        cache = final_reposition(model.config.rope, prefix, docs, prefill, "sort", plan)
        segs = cache.layers[0].segment_ids
        pos = cache.layers[0].position_ids
        # d1 (segment 1) occupies the slot adjacent to the query block
        d0_max = pos[segs == 0].max()
        d1_max = pos[segs == 1].max()
        q_min = pos[segs == QUERY_SEGMENT].min()
        assert d0_max < d1_max < q_min
        assert d1_max + 1 == q_min

    def test_none_is_fixed_point_without_pruning(self):
        model = small_model(seed=9)
        prefix = build_prefix_cache(model, [1, 2])
        docs = self.make_docs(model, prefix, 3)
        plan = plan_positions([d.doc_id for d in docs], 1, cache_len=2, prefix_len=2)
        prefill = self.run_prefill(model, prefix, docs, plan)
        cache = final_reposition(model.config.rope, prefix, docs, prefill, "none", plan)
        pos = cache.layers[0].position_ids
        expected = np.concatenate([
            np.arange(2), np.arange(2, 8), prefill.query_positions])
        np.testing.assert_array_equal(pos, expected)

    def test_align_compacts_after_pruning_gaps(self):
        model = small_model(seed=10)
        prefix = build_prefix_cache(model, [1, 2])
        docs = self.make_docs(model, prefix, 4)
        plan = plan_positions([d.doc_id for d in docs], 1, cache_len=2, prefix_len=2)
        prefill = self.run_prefill(model, prefix, docs, plan,
                                   schedule=PruningSchedule(interval=2, k_finish=2))
        survivors = [d for d in docs if d.doc_id in prefill.surviving_ids]
        cache = final_reposition(model.config.rope, prefix, survivors, prefill, "align", plan)
        pos = cache.layers[0].position_ids
        # contiguous: prefix 0..1, two docs 2..5, query right after
        np.testing.assert_array_equal(
            pos[:8], np.concatenate([np.arange(2), np.arange(2, 6), np.array([6, 7])]))

    def test_unknown_strategy_rejected(self):
        model = small_model(seed=11)
        prefix = build_prefix_cache(model, [1])
        docs = self.make_docs(model, prefix, 1)
        plan = plan_positions(["d0"], 1, cache_len=2, prefix_len=1)
        prefill = self.run_prefill(model, prefix, docs, plan)
        with pytest.raises(ValueError):
            final_reposition(model.config.rope, prefix, docs, prefill, "best", plan)


def build_fixture(tmp_path, model, corpus, prefix_text="ctx:", passage_len=12):
    tokenizer = ByteTokenizer()
    prefix_tokens = tokenizer.encode(prefix_text, add_bos=True)
    store = CacheStore(tmp_path / "store", model)
    store.build(prefix_tokens, corpus, passage_len=passage_len)
    index = index_corpus(corpus)
    return store, index, prefix_tokens


class TestPipeline:
    corpus = [
        ("doc-paris", "paris", "paris is the capital of france"),
        ("doc-rome", "rome", "rome is the capital of italy"),
        ("doc-berlin", "berlin", "berlin is the capital of germany"),
    ]

    def test_zero_documents_falls_back_to_prefix_and_query(self, tmp_path):
        model = small_model(seed=12)
        store, index, _ = build_fixture(tmp_path, model, self.corpus)
        pipeline = Pipeline(model, store, index)
        result = pipeline.run("anything", k=0, gen_tokens=3)
        assert len(result.tokens) == 3
        assert result.trace.retrieved_ids == []
        assert result.trace.final_ids == []

    def test_trace_reports_schedule_contract(self, tmp_path):
        model = small_model(seed=13)
        store, index, _ = build_fixture(tmp_path, model, self.corpus)
        pipeline = Pipeline(model, store, index)
        result = pipeline.run("the capital", k=3, gen_tokens=2,
                              schedule=PruningSchedule(interval=2, k_finish=1))
        assert len(result.trace.final_ids) == 1
        assert result.trace.op_counts["prefill_mults"] > 0
        assert result.trace.timings["total_s"] == pytest.approx(
            result.trace.timings["prefill_s"] + result.trace.timings["decode_s"], abs=1e-6)

    def test_single_document_identity_with_naive_forward(self, tmp_path):
        """k=1, no pruning, sequential layout reproduces the monolithic path."""
        model = small_model(seed=14)
        store, index, prefix_tokens = build_fixture(tmp_path, model, self.corpus)
        pipeline = Pipeline(model, store, index, query_reserve=64)
        query = "capital of france"
        result = pipeline.run(query, k=1, strategy="none", gen_tokens=8)

        tokenizer = ByteTokenizer()
        doc_id = result.trace.retrieved_ids[0]
        record = next(r for r in self.corpus if r[0] == doc_id)
        passage = passage_tokens(tokenizer, record[1], record[2], store.passage_len)
        naive_tokens, _, _ = run_full_context(
            model, prefix_tokens, [passage], tokenizer.encode(query), gen_tokens=8)
        assert result.tokens == naive_tokens

    def test_multi_group_run_stays_within_range(self, tmp_path):
        model = small_model(seed=15, max_position=64)
        corpus = [(f"d{i}", "t", f"tokens {i} capital") for i in range(6)]
        store, index, _ = build_fixture(tmp_path, model, corpus, passage_len=12)
        pipeline = Pipeline(model, store, index, query_reserve=20)
        result = pipeline.run("capital tokens", k=6, gen_tokens=2)
        assert result.trace.n_reuse > 1
        starts = [s["start"] for s in result.trace.plan["slots"].values()]
        assert max(starts) + 12 <= 64
