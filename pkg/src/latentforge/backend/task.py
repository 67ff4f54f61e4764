"""Synthetic quadrant-color lookup task for the toy backend.

Each instance is a 6x6 grid of color patches split into four 3x3
quadrants, each painted a single color drawn without replacement from a
palette of six.  The query asks for the color of one quadrant; the gold
answer is that color's token.  The patches of the queried quadrant are
the ground-truth relevant set, which gives the query-to-visual relevance
ranking a known signal to recover.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .types import QueryTokens, VisualSpec

__all__ = [
    "ToyTaskInstance",
    "toy_task_sample",
    "split_relevant_groups",
    "clue_latents",
    "GRID_ROWS",
    "GRID_COLS",
    "N_COLORS",
    "PATCH_DIM",
    "VOCAB_SIZE",
    "ASK_ID",
    "QUADRANT_IDS",
    "END_OF_QUERY_ID",
    "LATENT_START_ID",
    "LATENT_END_ID",
    "EOS_ID",
    "UNKNOWN_ID",
    "quadrant_indices",
    "quadrant_colors",
]

GRID_ROWS = 6
GRID_COLS = 6
N_COLORS = 6
PATCH_DIM = 8
PATCH_NOISE = 0.05

# Vocabulary layout.  Color answers occupy the low ids; the top ids are
# reserved control tokens shared with the toy backbone.
VOCAB_SIZE = 64
ASK_ID = 16
QUADRANT_IDS = (17, 18, 19, 20)
END_OF_QUERY_ID = 21
UNKNOWN_ID = 22
LATENT_START_ID = 61
LATENT_END_ID = 62
EOS_ID = 63

# The color -> feature mapping is part of the task definition, not of any
# instance, so it is drawn once from its own fixed seed.
_COLOR_FEATURE_SEED = 715503
_COLOR_FEATURES = np.random.Generator(np.random.PCG64(_COLOR_FEATURE_SEED)).normal(
    0.0, 1.0, size=(N_COLORS, PATCH_DIM)
)


class ToyTaskInstance(NamedTuple):
    visual: VisualSpec
    query: QueryTokens
    gold_answer_ids: tuple[int, ...]
    relevant_patches: tuple[int, ...]


def quadrant_indices(quadrant: int) -> tuple[int, ...]:
    """Flat patch indices of one 3x3 quadrant in row-major grid order."""
    qr, qc = divmod(quadrant, 2)
    rows = range(qr * 3, qr * 3 + 3)
    cols = range(qc * 3, qc * 3 + 3)
    return tuple(r * GRID_COLS + c for r in rows for c in cols)


def quadrant_colors(visual: VisualSpec) -> tuple[int, int, int, int]:
    """Recover each quadrant's color id from the (noisy) patch features."""
    colors = []
    for quadrant in range(4):
        mean_feat = visual.patches[list(quadrant_indices(quadrant))].mean(axis=0)
        dists = np.linalg.norm(_COLOR_FEATURES - mean_feat, axis=1)
        colors.append(int(dists.argmin()))
    return tuple(colors)


def toy_task_sample(seed: int) -> ToyTaskInstance:
    """Draw one deterministic task instance from the given seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    colors = rng.permutation(N_COLORS)[:4]
    color_grid = np.empty(GRID_ROWS * GRID_COLS, dtype=np.int64)
    for quadrant in range(4):
        color_grid[list(quadrant_indices(quadrant))] = colors[quadrant]

    patches = _COLOR_FEATURES[color_grid] + PATCH_NOISE * rng.normal(
        0.0, 1.0, size=(GRID_ROWS * GRID_COLS, PATCH_DIM)
    )
    quadrant = int(rng.integers(0, 4))

    visual = VisualSpec(patches=patches, grid_shape=(GRID_ROWS, GRID_COLS))
    query = QueryTokens(ids=(ASK_ID, QUADRANT_IDS[quadrant], END_OF_QUERY_ID))
    gold = (int(colors[quadrant]),)
    relevant = quadrant_indices(quadrant)
    return ToyTaskInstance(visual, query, gold, relevant)


def split_relevant_groups(relevant: tuple[int, ...], k: int) -> list[tuple[int, ...]]:
    """Round-robin the relevant patch indices into k non-empty groups."""
    if k < 1:
        raise ValueError("need at least one group")
    if len(relevant) < k:
        raise ValueError(f"cannot split {len(relevant)} patches into {k} non-empty groups")
    groups: list[list[int]] = [[] for _ in range(k)]
    for pos, idx in enumerate(relevant):
        groups[pos % k].append(idx)
    return [tuple(g) for g in groups]


def clue_latents(visual_embeddings: np.ndarray, relevant: tuple[int, ...], k: int) -> np.ndarray:
    """Per-latent alignment targets: mean embedding of each relevant-patch group.

    ``visual_embeddings`` is the backend's N x d matrix of projected visual
    token vectors; the result is a k x d matrix.
    """
    emb = np.asarray(visual_embeddings, dtype=np.float64)
    groups = split_relevant_groups(relevant, k)
    return np.stack([emb[list(g)].mean(axis=0) for g in groups])
