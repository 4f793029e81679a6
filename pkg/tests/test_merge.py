import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linvid.merge import (
    FrameTokenSet,
    MergeDecision,
    MergedToken,
    ScheduleError,
    bipartite_soft_match,
    merge_tokens,
    partition_alternating,
    plan_layer,
    plan_schedule,
    similarity_scores,
    sort_by_size,
    stome_layer,
)

from .oracles import brute_force_stome


def tok(emb, size=1, origin=0):
    return MergedToken(np.asarray(emb, dtype=float), size, origin)


def frame_from(embs, cls=None):
    embs = np.asarray(embs, dtype=float)
    cls = np.zeros(embs.shape[1]) if cls is None else cls
    return FrameTokenSet.from_embeddings(np.vstack([cls, embs]))


class TestPartition:
    def test_stride_two(self):
        A, B = partition_alternating(["t0", "t1", "t2", "t3"])
        assert A == ["t0", "t2"] and B == ["t1", "t3"]

    def test_single(self):
        A, B = partition_alternating(["t0"])
        assert A == ["t0"] and B == []

    def test_empty_b_forces_zero_merges(self):
        toks = [tok([1.0, 0.0])]
        assert bipartite_soft_match(toks, similarity_scores(toks, []), 0).pairs == []
        with pytest.raises(ScheduleError):
            bipartite_soft_match(toks, similarity_scores(toks, []), 1)


class TestSimilarity:
    def test_identical_and_orthogonal(self):
        s = similarity_scores([tok([0.6, 0.8])], [tok([0.6, 0.8]), tok([-0.8, 0.6])])
        np.testing.assert_allclose(s, [[1.0, 0.0]], atol=1e-15)

    def test_two_by_two(self):
        s = similarity_scores([tok([1, 0]), tok([0, 1])], [tok([1, 0]), tok([-1, 0])])
        np.testing.assert_allclose(s, [[1, -1], [0, 0]], atol=1e-15)

    def test_zero_norm_scores_zero(self):
        s = similarity_scores([tok([0, 0])], [tok([1, 2]), tok([0, 0])])
        np.testing.assert_array_equal(s, [[0, 0]])


class TestSoftMatch:
    def test_r_zero(self):
        toks = [tok([1, 0], origin=i) for i in range(4)]
        d = bipartite_soft_match(toks, similarity_scores(*partition_alternating(toks)), 0)
        assert d.pairs == [] and d.unmerged == [0, 1, 2, 3]

    def test_two_by_two_picks_best_edge(self):
        # A = (1,0), (0,1); B = (1,0), (-1,0)
        toks = [tok([1, 0], origin=0), tok([1, 0], origin=1), tok([0, 1], origin=2), tok([-1, 0], origin=3)]
        d = bipartite_soft_match(toks, similarity_scores(*partition_alternating(toks)), 1)
        assert d.pairs == [(0, 0)]
        assert sorted(d.unmerged) == [2, 3]

    def test_ties_lowest_a_first(self):
        toks = [tok([1, 1], origin=i) for i in range(4)]
        d = bipartite_soft_match(toks, similarity_scores(*partition_alternating(toks)), 2)
        assert [i for i, _ in d.pairs] == [0, 1]
        assert all(j == 0 for _, j in d.pairs)

    def test_r_exceeds_b(self):
        toks = [tok([1, 0], origin=i) for i in range(3)]
        with pytest.raises(ScheduleError):
            bipartite_soft_match(toks, similarity_scores(*partition_alternating(toks)), 2)

    def test_decision_covers_every_token_once(self):
        rng = np.random.default_rng(0)
        toks = [tok(rng.normal(size=3), origin=i) for i in range(9)]
        d = bipartite_soft_match(toks, similarity_scores(*partition_alternating(toks)), 3)
        srcs = [i for i, _ in d.pairs]
        assert len(srcs) == len(set(srcs)) == 3
        in_pairs = {2 * i for i, _ in d.pairs} | {2 * j + 1 for _, j in d.pairs}
        assert in_pairs.isdisjoint(d.unmerged)
        assert in_pairs | set(d.unmerged) == set(range(9))


class TestMergeTokens:
    def test_weighted_mean(self):
        toks = [tok([2, 0], 1, 0), tok([0, 2], 3, 1)]
        out = merge_tokens(MergeDecision([(0, 0)], []), toks)
        assert len(out) == 1
        np.testing.assert_allclose(out[0].embedding, [0.5, 1.5])
        assert out[0].size == 4 and out[0].origin == 0

    def test_identical_tokens(self):
        toks = [tok([1, 3], 2, 4), tok([1, 3], 2, 5)]
        out = merge_tokens(MergeDecision([(0, 0)], []), toks)
        np.testing.assert_allclose(out[0].embedding, [1, 3])
        assert out[0].size == 4

    def test_three_onto_one(self):
        e1, e2, e3 = np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])
        # positions: A0=0 (e1), B0=1 (e3, size 2), A1=2 (e2)
        toks = [tok(e1, 1, 0), tok(e3, 2, 1), tok(e2, 1, 2)]
        out = merge_tokens(MergeDecision([(0, 0), (1, 0)], []), toks)
        assert len(out) == 1
        np.testing.assert_allclose(out[0].embedding, (e1 + e2 + 2 * e3) / 4)
        assert out[0].size == 4


class TestSort:
    def test_ascending(self):
        toks = [tok([0], s, i) for i, s in enumerate([3, 1, 2])]
        assert [t.size for t in sort_by_size(toks, "ascending")] == [1, 2, 3]

    def test_stable_by_origin(self):
        toks = [tok([0], s, o) for s, o in zip([1, 4, 2, 1], [0, 5, 9, 12])]
        assert [t.origin for t in sort_by_size(toks, "ascending")] == [0, 12, 9, 5]

    def test_equal_sizes_keep_origin_order(self):
        toks = [tok([0], 2, o) for o in [3, 7, 11]]
        assert [t.origin for t in sort_by_size(toks, "asc")] == [3, 7, 11]
        assert [t.origin for t in sort_by_size(toks, "desc")] == [3, 7, 11]

    def test_random_is_seeded(self):
        toks = [tok([i], 1, i) for i in range(20)]
        a = [t.origin for t in sort_by_size(toks, "random", 5)]
        b = [t.origin for t in sort_by_size(toks, "random", 5)]
        assert a == b and sorted(a) == list(range(20)) and a != list(range(20))

    def test_unknown_order(self):
        with pytest.raises(ValueError):
            sort_by_size([], "sideways")


class TestStomeLayer:
    def test_counts_384(self):
        rng = np.random.default_rng(1)
        f = frame_from(rng.normal(size=(576, 8)))
        out = stome_layer(f, 24)
        assert len(out) == 553
        assert sum(out.sizes()) == 576

    def test_r_zero_is_identity_sorted(self):
        rng = np.random.default_rng(2)
        f = frame_from(rng.normal(size=(10, 4)))
        out = stome_layer(f, 0)
        assert [t.origin for t in out.patches] == list(range(10))
        np.testing.assert_array_equal(out.embeddings(), f.embeddings())

    def test_too_many(self):
        f = frame_from(np.eye(4))
        with pytest.raises(ScheduleError):
            stome_layer(f, 3)

    def test_five_patch_trace(self):
        # A = p0, p2, p4 ; B = p1, p3
        embs = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 1.0], [-1.0, 0.2]])
        trace = []
        out = stome_layer(frame_from(embs), 2, "ascending", trace=trace)
        # best edges: p0->p1 (cos .994), p2->p3 (cos .995), p4->p3 (cos .10)
        assert trace[0]["pairs"] == [[1, 1], [0, 0]]
        assert trace[0]["pair_origins"] == [[2, 3], [0, 1]]
        assert [t.size for t in out.patches] == [1, 2, 2]
        assert [t.origin for t in out.patches] == [4, 0, 2]
        np.testing.assert_allclose(out.patches[1].embedding, (embs[0] + embs[1]) / 2)
        np.testing.assert_allclose(out.patches[2].embedding, (embs[2] + embs[3]) / 2)
        ref = brute_force_stome(embs.tolist(), [1] * 5, list(range(5)), 2, "ascending")
        assert [(s, o) for _, s, o in ref] == [(1, 4), (2, 0), (2, 2)]

    def test_cls_untouched(self):
        rng = np.random.default_rng(3)
        cls = rng.normal(size=4)
        f = frame_from(rng.normal(size=(12, 4)), cls)
        for r in (3, 2, 2):
            f = stome_layer(f, r)
            assert f.cls.embedding.tobytes() == cls.tobytes()
        assert len(f.patches) == 5

    @pytest.mark.parametrize("order", ["ascending", "descending"])
    def test_small_n_matches_brute_force(self, order):
        rng = np.random.default_rng(4)
        for _ in range(150):
            n = int(rng.integers(1, 7))
            d = int(rng.integers(1, 4))
            embs = rng.normal(size=(n, d))
            sizes = rng.integers(1, 4, size=n)
            origins = rng.permutation(20)[:n]
            r = int(rng.integers(0, n // 2 + 1))
            f = FrameTokenSet(tok(np.zeros(d)), [tok(e, int(s), int(o)) for e, s, o in zip(embs, sizes, origins)], int(sizes.sum()))
            out = stome_layer(f, r, order)
            ref = brute_force_stome(embs.tolist(), sizes.tolist(), origins.tolist(), r, order)
            assert [(t.size, t.origin) for t in out.patches] == [(s, o) for _, s, o in ref]
            for t, (e, _, _) in zip(out.patches, ref):
                np.testing.assert_allclose(t.embedding, e, rtol=1e-12, atol=1e-14)


class TestPlanLayer:
    @pytest.mark.parametrize("order", ["ascending", "descending"])
    def test_batched_equals_list_path(self, order):
        rng = np.random.default_rng(5)
        F, n, d = 6, 11, 5
        x = rng.normal(size=(F, n, d))
        sizes = rng.integers(1, 4, size=(F, n))
        origins = np.stack([rng.permutation(40)[:n] for _ in range(F)])
        plan = plan_layer(x, sizes, origins, 4, order)
        for f in range(F):
            fr = FrameTokenSet(tok(np.zeros(d)), [tok(e, int(s), int(o)) for e, s, o in zip(x[f], sizes[f], origins[f])], 0)
            out = stome_layer(fr, 4, order)
            assert plan.sizes[f].tolist() == [t.size for t in out.patches]
            assert plan.origins[f].tolist() == [t.origin for t in out.patches]
            np.testing.assert_allclose(plan.weights[f] @ x[f], np.stack([t.embedding for t in out.patches]), rtol=1e-12)

    def test_weights_rows_are_convex(self):
        rng = np.random.default_rng(6)
        plan = plan_layer(rng.normal(size=(3, 9, 4)), np.ones((3, 9), int), np.tile(np.arange(9), (3, 1)), 4)
        np.testing.assert_allclose(plan.weights.sum(-1), 1.0)
        assert (plan.sizes.sum(-1) == 9).all()

    def test_random_order_seeded(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 8, 3))
        kw = dict(sizes=np.ones((2, 8), int), origins=np.tile(np.arange(8), (2, 1)), r=2, order="random")
        a = plan_layer(x, rng=11, **kw)
        b = plan_layer(x, rng=11, **kw)
        np.testing.assert_array_equal(a.origins, b.origins)
        np.testing.assert_array_equal(a.weights, b.weights)


class TestSchedule:
    def test_large_preset_budget(self):
        s = plan_schedule(576, 23, 0.1)
        assert sum(s.removals) == 518
        assert s.removals.count(23) == 12 and s.removals.count(22) == 11
        assert s.removals[:12] == [23] * 12
        assert s.kept == 58

    def test_keep_all(self):
        assert plan_schedule(576, 23, 1.0).removals == [0] * 23

    def test_small(self):
        s = plan_schedule(16, 4, 0.25)
        assert s.removals == [3, 3, 3, 3] and s.kept == 4

    def test_infeasible_proposes_ratio(self):
        with pytest.raises(ScheduleError, match="nearest feasible keep_ratio"):
            plan_schedule(64, 4, 0.1)

    def test_bad_ratio(self):
        with pytest.raises(ScheduleError):
            plan_schedule(16, 2, 0.0)
        with pytest.raises(ScheduleError):
            plan_schedule(16, 0, 0.5)

    @settings(max_examples=200, deadline=None)
    @given(n=st.integers(1, 800), layers=st.integers(1, 30), ratio=st.floats(0.01, 1.0))
    def test_invariants(self, n, layers, ratio):
        try:
            s = plan_schedule(n, layers, ratio)
        except ScheduleError:
            return
        counts = s.counts()
        assert all(0 <= r <= c // 2 for r, c in zip(s.removals, counts))
        assert counts[-1] == max(int(np.floor(ratio * n + 0.5)), 1)
        assert max(s.removals) - min(s.removals) <= 1


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 40), order=st.sampled_from(["ascending", "descending", "random"]))
    def test_mass_and_count(self, seed, n, order):
        rng = np.random.default_rng(seed)
        f = frame_from(rng.normal(size=(n, 3)))
        sched = plan_schedule(n, 3, 0.5)
        expected = n
        for r in sched.removals:
            f = stome_layer(f, r, order, rng)
            expected -= r
            assert len(f.patches) == expected
            assert int(f.sizes().sum()) == n

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        embs = rng.normal(size=(30, 4))
        outs = []
        for _ in range(2):
            f = frame_from(embs)
            for r in (7, 5, 4):
                f = stome_layer(f, r, "random", np.random.default_rng(3))
            outs.append(f.embeddings())
        np.testing.assert_array_equal(outs[0], outs[1])
