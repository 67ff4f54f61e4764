"""Query-guided relevance over visual tokens and per-latent chunk assignment.

The relevance score of visual token n is the mean attention that the
query positions pay to it, taken from the layer/head-averaged attention
block.  Tokens are ranked by score and the ranking is partitioned into
disjoint fixed-size chunks: each latent k receives a positive chunk from
the top of the ranking and a negative chunk from the bottom, with latent
1 taking both the very top positives and the very bottom negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "relevance_scores",
    "rank_descending",
    "assign_chunks",
    "rank_visual_tokens",
    "RelevanceRanking",
    "ChunkAssignment",
]


@dataclass(frozen=True)
class RelevanceRanking:
    """Scores plus the permutation that sorts them in descending order."""

    scores: np.ndarray
    permutation: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        perm = np.asarray(self.permutation, dtype=np.int64)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "permutation", perm)
        n = scores.shape[0]
        if sorted(perm.tolist()) != list(range(n)):
            raise ValueError("permutation must be a bijection on the token indices")
        ranked = scores[perm]
        if np.any(np.diff(ranked) > 0):
            raise ValueError("permutation must order scores non-increasingly")
        if np.any(scores < 0) or np.any(scores > 1):
            raise ValueError("relevance scores must lie in [0, 1]")


@dataclass(frozen=True)
class ChunkAssignment:
    """Per-latent positive and negative visual-token index chunks.

    ``positives[k]`` and ``negatives[k]`` keep ranking order; all 2K
    chunks are pairwise disjoint with exact cardinalities.
    """

    positives: tuple[np.ndarray, ...]
    negatives: tuple[np.ndarray, ...]
    pos_num: int
    neg_num: int

    @property
    def k(self) -> int:
        return len(self.positives)


def relevance_scores(qv_attention: np.ndarray) -> np.ndarray:
    """Mean over query rows of each visual column."""
    attn = np.asarray(qv_attention, dtype=np.float64)
    if attn.ndim != 2 or attn.shape[0] < 1 or attn.shape[1] < 1:
        raise ValueError(f"attention block must be a nonempty 2-D matrix, got {attn.shape}")
    if np.any(attn < 0):
        raise ValueError("attention entries must be non-negative")
    return attn.mean(axis=0)


def rank_descending(scores: np.ndarray) -> np.ndarray:
    """Stable descending sort; ties keep ascending original index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] < 1:
        raise ValueError("scores must be a nonempty vector")
    return np.argsort(-scores, kind="stable").astype(np.int64)


def assign_chunks(permutation: np.ndarray, k: int, pos_num: int, neg_num: int) -> ChunkAssignment:
    """Carve disjoint positive/negative chunks out of the ranking.

    Positive chunk k is ranks ``(k-1)*pos_num .. k*pos_num`` from the top;
    negative chunk k mirrors from the bottom, so latent 1 is repelled from
    the lowest-ranked content.  Requires N >= k * (pos_num + neg_num).
    """
    perm = np.asarray(permutation, dtype=np.int64)
    n = perm.shape[0]
    if k < 1 or pos_num < 1 or neg_num < 1:
        raise ValueError("k, pos_num and neg_num must all be at least 1")
    if n < k * (pos_num + neg_num):
        raise ValueError(
            f"{n} visual tokens cannot host {k} disjoint chunks of "
            f"{pos_num}+{neg_num} tokens each"
        )
    positives = tuple(perm[i * pos_num : (i + 1) * pos_num].copy() for i in range(k))
    negatives = tuple(
        perm[n - (i + 1) * neg_num : n - i * neg_num].copy() for i in range(k)
    )
    return ChunkAssignment(positives=positives, negatives=negatives,
                           pos_num=pos_num, neg_num=neg_num)


def rank_visual_tokens(qv_attention: np.ndarray) -> RelevanceRanking:
    """Convenience wrapper: scores and ranking in one call."""
    scores = relevance_scores(qv_attention)
    return RelevanceRanking(scores=scores, permutation=rank_descending(scores))
