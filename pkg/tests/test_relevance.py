"""Relevance scoring, ranking, and chunk assignment."""

import numpy as np
import pytest

from latentforge.relevance import (
    ChunkAssignment,
    RelevanceRanking,
    assign_chunks,
    rank_descending,
    rank_visual_tokens,
    relevance_scores,
)


class TestRelevanceScores:
    def test_hand_computed_column_means(self):
        attn = np.array([[0.5, 0.1], [0.3, 0.2]])
        np.testing.assert_allclose(relevance_scores(attn), [0.4, 0.15], atol=1e-15)

    def test_single_query_row_is_identity(self):
        row = np.array([[0.2, 0.05, 0.7]])
        np.testing.assert_array_equal(relevance_scores(row), row[0])

    def test_all_zero_attention_gives_zero_scores(self):
        np.testing.assert_array_equal(relevance_scores(np.zeros((3, 5))), np.zeros(5))

    def test_empty_block_rejected(self):
        with pytest.raises(ValueError):
            relevance_scores(np.zeros((0, 4)))

    def test_negative_entries_rejected(self):
        with pytest.raises(ValueError):
            relevance_scores(np.array([[0.1, -0.2]]))

    def test_invariant_under_query_row_permutation(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            attn = rng.uniform(0, 0.1, size=(rng.integers(1, 8), rng.integers(1, 20)))
            perm = rng.permutation(attn.shape[0])
            np.testing.assert_allclose(
                relevance_scores(attn), relevance_scores(attn[perm]), atol=1e-15
            )

    def test_mean_of_scores_equals_mean_of_block(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            attn = rng.uniform(0, 1 / 40, size=(rng.integers(1, 9), rng.integers(1, 40)))
            assert abs(relevance_scores(attn).mean() - attn.mean()) <= 1e-12


class TestRankDescending:
    def test_continues_score_example(self):
        assert rank_descending(np.array([0.4, 0.15])).tolist() == [0, 1]

    def test_strictly_descending_input_is_identity(self):
        assert rank_descending(np.array([0.9, 0.5, 0.2, 0.1])).tolist() == [0, 1, 2, 3]

    def test_all_equal_scores_keep_original_order(self):
        assert rank_descending(np.full(6, 0.25)).tolist() == list(range(6))

    def test_partial_ties_break_by_ascending_index(self):
        assert rank_descending(np.array([0.3, 0.7, 0.3, 0.7])).tolist() == [1, 3, 0, 2]

    def test_composed_scores_are_non_increasing(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            scores = rng.uniform(0, 1, size=rng.integers(1, 50))
            ranked = scores[rank_descending(scores)]
            assert np.all(np.diff(ranked) <= 0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            rank_descending(np.array([]))


class TestAssignChunks:
    def test_layout_for_sixteen_tokens(self):
        # K=2, pos_num=2, neg_num=4: positives from the top of the ranking,
        # negatives mirrored from the bottom with latent 1 taking the lowest.
        perm = np.arange(16)
        out = assign_chunks(perm, k=2, pos_num=2, neg_num=4)
        assert out.positives[0].tolist() == [0, 1]
        assert out.positives[1].tolist() == [2, 3]
        assert out.negatives[0].tolist() == [12, 13, 14, 15]
        assert out.negatives[1].tolist() == [8, 9, 10, 11]

    def test_layout_follows_permutation_not_identity(self):
        rng = np.random.default_rng(5)
        perm = rng.permutation(16)
        out = assign_chunks(perm, k=2, pos_num=2, neg_num=4)
        assert out.positives[0].tolist() == perm[0:2].tolist()
        assert out.negatives[0].tolist() == perm[12:16].tolist()

    def test_exact_fit_uses_every_index_once(self):
        perm = np.arange(12)
        out = assign_chunks(perm, k=2, pos_num=2, neg_num=4)
        used = np.concatenate([*out.positives, *out.negatives])
        assert sorted(used.tolist()) == list(range(12))

    def test_too_few_tokens_rejected(self):
        with pytest.raises(ValueError):
            assign_chunks(np.arange(5), k=2, pos_num=2, neg_num=4)

    def test_disjoint_with_exact_cardinalities_over_random_tuples(self):
        rng = np.random.default_rng(14)
        for _ in range(300):
            k = int(rng.integers(1, 6))
            pos = int(rng.integers(1, 5))
            neg = int(rng.integers(1, 6))
            n = k * (pos + neg) + int(rng.integers(0, 20))
            out = assign_chunks(rng.permutation(n), k, pos, neg)
            chunks = [set(c.tolist()) for c in (*out.positives, *out.negatives)]
            assert all(len(c) == (pos if i < k else neg) for i, c in enumerate(chunks))
            union = set().union(*chunks)
            assert len(union) == sum(len(c) for c in chunks)

    def test_positives_rank_above_negatives(self):
        rng = np.random.default_rng(15)
        for _ in range(100):
            k = int(rng.integers(1, 5))
            pos = int(rng.integers(1, 4))
            neg = int(rng.integers(1, 5))
            n = k * (pos + neg) + int(rng.integers(0, 10))
            perm = rng.permutation(n)
            rank_of = {int(tok): t for t, tok in enumerate(perm)}
            out = assign_chunks(perm, k, pos, neg)
            worst_pos = max(rank_of[int(t)] for c in out.positives for t in c)
            best_neg = min(rank_of[int(t)] for c in out.negatives for t in c)
            assert worst_pos < best_neg


class TestRankingTypes:
    def test_rank_visual_tokens_bundles_scores_and_permutation(self):
        attn = np.array([[0.5, 0.1], [0.3, 0.2]])
        ranking = rank_visual_tokens(attn)
        np.testing.assert_allclose(ranking.scores, [0.4, 0.15])
        assert ranking.permutation.tolist() == [0, 1]

    def test_invalid_permutation_rejected(self):
        with pytest.raises(ValueError):
            RelevanceRanking(scores=np.array([0.1, 0.2]), permutation=np.array([0, 0]))

    def test_misordered_permutation_rejected(self):
        with pytest.raises(ValueError):
            RelevanceRanking(scores=np.array([0.1, 0.2]), permutation=np.array([0, 1]))

    def test_out_of_range_scores_rejected(self):
        with pytest.raises(ValueError):
            RelevanceRanking(scores=np.array([1.5, 0.2]), permutation=np.array([0, 1]))

    def test_chunk_assignment_reports_latent_count(self):
        out = assign_chunks(np.arange(12), k=2, pos_num=2, neg_num=4)
        assert isinstance(out, ChunkAssignment)
        assert out.k == 2
