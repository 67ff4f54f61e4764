"""Core data types shared by every model backend.

A backend turns a (visual, query) pair into an opaque context and then
answers three questions about a candidate latent state: what are the
next-token logits at each latent position, how much attention do the
query tokens pay to each visual token, and what answer does greedy
decoding produce.  All array payloads are float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "VisualSpec",
    "QueryTokens",
    "BackendContext",
    "EvalOutput",
    "DecodeOutput",
]

ATTENTION_ROW_TOL = 1e-6


@dataclass(frozen=True)
class VisualSpec:
    """Patch features for one image: an N x d_in matrix plus its grid shape."""

    patches: np.ndarray
    grid_shape: tuple[int, int]

    def __post_init__(self):
        patches = np.asarray(self.patches, dtype=np.float64)
        object.__setattr__(self, "patches", patches)
        if patches.ndim != 2 or patches.shape[0] < 1:
            raise ValueError(f"patches must be a nonempty 2-D matrix, got shape {patches.shape}")
        rows, cols = self.grid_shape
        if rows * cols != patches.shape[0]:
            raise ValueError(
                f"grid_shape {self.grid_shape} does not cover {patches.shape[0]} patches"
            )
        if not np.all(np.isfinite(patches)):
            raise ValueError("patch features must be finite")

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]


@dataclass(frozen=True)
class QueryTokens:
    """Tokenized query text."""

    ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        if len(ids) < 1:
            raise ValueError("query must contain at least one token")
        if any(i < 0 for i in ids):
            raise ValueError("query token ids must be non-negative")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class BackendContext:
    """Handle for one encoded (visual, query) instance.

    ``visual_index_set`` and ``query_index_set`` are disjoint position sets
    that together cover the prompt positions ``0 .. seq_len-1``; latents are
    appended after ``seq_len`` by the backend when evaluating or decoding.
    """

    instance_id: str
    n_visual: int
    visual_index_set: tuple[int, ...]
    query_index_set: tuple[int, ...]
    seq_len: int
    latent_dim: int

    def __post_init__(self):
        vis = set(self.visual_index_set)
        qry = set(self.query_index_set)
        if vis & qry:
            raise ValueError("visual and query index sets must be disjoint")
        if len(vis) != self.n_visual:
            raise ValueError("visual index set size must equal n_visual")
        all_idx = vis | qry
        if all_idx and max(all_idx) >= self.seq_len:
            raise ValueError("index sets exceed the declared sequence length")


@dataclass(frozen=True)
class EvalOutput:
    """One forward evaluation of a latent state.

    latent_logits[k] holds the model's next-token logits when the input
    ends at latent k.  qv_attention is the query-rows x visual-columns
    block of the attention matrix averaged over all layers and heads;
    each row is a slice of a full softmax row, so it sums to at most 1.
    """

    latent_logits: np.ndarray
    qv_attention: np.ndarray
    visual_embeddings: np.ndarray
    latent_end_logit_per_position: np.ndarray

    def __post_init__(self):
        for name in ("latent_logits", "qv_attention", "visual_embeddings",
                     "latent_end_logit_per_position"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, arr)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        if np.any(self.qv_attention < 0):
            raise ValueError("attention entries must be non-negative")
        row_sums = self.qv_attention.sum(axis=1)
        if np.any(row_sums > 1.0 + ATTENTION_ROW_TOL):
            raise ValueError("attention rows must sum to at most 1")


@dataclass(frozen=True)
class DecodeOutput:
    """Greedily decoded answer plus where its attention mass went."""

    token_ids: tuple[int, ...]
    attention_share_latent: float
    attention_share_visual: float

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(t) for t in self.token_ids))
        lat, vis = self.attention_share_latent, self.attention_share_visual
        if lat < 0 or vis < 0:
            raise ValueError("attention shares must be non-negative")
        if lat + vis > 1.0 + ATTENTION_ROW_TOL:
            raise ValueError("attention shares exceed total probability mass")


def ensure_latents(latents: np.ndarray, dim: int | None = None) -> np.ndarray:
    """Validate a K x d latent matrix and return it as float64."""
    arr = np.asarray(latents, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError(f"latent state must be a nonempty K x d matrix, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"latent dimension {arr.shape[1]} does not match backend dimension {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("latent state contains non-finite values")
    return arr
