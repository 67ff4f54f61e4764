"""Stage I: contrastive warm-up of the latent state against visual tokens.

Each latent is pulled toward its positive chunk of visual embeddings and
pushed from its negative chunk under a temperature-scaled cosine
softmax.  The set-size correction beta = (pos_num + neg_num) / pos_num
makes the loss exactly zero when every similarity inside a chunk pair is
equal, so the objective only rewards genuine contrast.  Only the latent
state is updated; the backend stays frozen throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend.base import ModelBackend
from .backend.types import BackendContext, ensure_latents
from .relevance import ChunkAssignment, assign_chunks, rank_descending, relevance_scores

__all__ = [
    "WarmupConfig",
    "WarmupTrace",
    "cosine_sim",
    "contrastive_loss",
    "contrastive_grad",
    "warmup_run",
]


@dataclass(frozen=True)
class WarmupConfig:
    """Stage I knobs.  ``learning_rate=None`` resolves to twice the mean
    squared latent norm: the contrastive objective is scale-invariant, so
    its gradients shrink as 1/|h| and a useful step size must grow with
    the latent scale."""

    tau: float = 0.1
    learning_rate: float | None = None
    n_sft: int = 5
    pos_num: int = 2
    neg_num: int = 4

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.n_sft < 0:
            raise ValueError("n_sft must be non-negative")
        if self.pos_num < 1 or self.neg_num < 1:
            raise ValueError("pos_num and neg_num must be at least 1")

    def resolve_learning_rate(self, latents: np.ndarray) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        mean_sq = float(np.mean(np.sum(np.square(latents), axis=1)))
        return 2.0 * mean_sq if mean_sq > 0 else 0.1


@dataclass(frozen=True, eq=False)
class WarmupTrace:
    """Loss before every step plus the final loss, and per-step gradient norms."""

    loss_per_step: np.ndarray
    grad_norm_per_step: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, WarmupTrace):
            return NotImplemented
        return np.array_equal(self.loss_per_step, other.loss_per_step) and np.array_equal(
            self.grad_norm_per_step, other.grad_norm_per_step
        )

    def __post_init__(self):
        loss = np.asarray(self.loss_per_step, dtype=np.float64)
        grad = np.asarray(self.grad_norm_per_step, dtype=np.float64)
        object.__setattr__(self, "loss_per_step", loss)
        object.__setattr__(self, "grad_norm_per_step", grad)
        if loss.shape[0] != grad.shape[0] + 1:
            raise ValueError("loss trace must be one longer than the gradient trace")
        if not (np.all(np.isfinite(loss)) and np.all(np.isfinite(grad))):
            raise ValueError("trace values must be finite")


def cosine_sim(h: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity of two nonzero vectors."""
    h = np.asarray(h, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nh = np.linalg.norm(h)
    nv = np.linalg.norm(v)
    if nh == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity is undefined for zero-norm vectors")
    return float(h @ v / (nh * nv))


def _chunk_sims(h: np.ndarray, emb: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Similarities of latent h against emb[idx], plus the pieces the gradient needs."""
    vectors = emb[idx]
    norms = np.linalg.norm(vectors, axis=1)
    nh = np.linalg.norm(h)
    if nh == 0.0 or np.any(norms == 0.0):
        raise ValueError("cosine similarity is undefined for zero-norm vectors")
    sims = vectors @ h / (norms * nh)
    return sims, norms, nh


def contrastive_loss(
    latents: np.ndarray,
    visual_embeddings: np.ndarray,
    assignment: ChunkAssignment,
    tau: float,
) -> float:
    """Mean over latents of the beta-corrected positive/negative log-ratio.

    Can be negative: beta pushes the ratio above 1 whenever positives are
    on average more similar than negatives.
    """
    latents = ensure_latents(latents)
    emb = np.asarray(visual_embeddings, dtype=np.float64)
    if assignment.k != latents.shape[0]:
        raise ValueError("assignment latent count does not match the latent state")
    beta = (assignment.pos_num + assignment.neg_num) / assignment.pos_num
    total = 0.0
    for k in range(assignment.k):
        union = np.concatenate([assignment.positives[k], assignment.negatives[k]])
        sims, _, _ = _chunk_sims(latents[k], emb, union)
        z = sims / tau
        z -= z.max()
        e = np.exp(z)
        sum_pos = e[: assignment.pos_num].sum()
        sum_all = e.sum()
        total += -(np.log(beta) + np.log(sum_pos) - np.log(sum_all))
    return total / assignment.k


def contrastive_grad(
    latents: np.ndarray,
    visual_embeddings: np.ndarray,
    assignment: ChunkAssignment,
    tau: float,
) -> np.ndarray:
    """Exact gradient of :func:`contrastive_loss` with respect to each latent.

    Uses d sim(h, v)/d h = v / (|h||v|) - sim(h, v) * h / |h|^2; row k only
    touches the embeddings in its own positive and negative chunks.
    """
    latents = ensure_latents(latents)
    emb = np.asarray(visual_embeddings, dtype=np.float64)
    if assignment.k != latents.shape[0]:
        raise ValueError("assignment latent count does not match the latent state")
    grad = np.zeros_like(latents)
    for k in range(assignment.k):
        h = latents[k]
        union = np.concatenate([assignment.positives[k], assignment.negatives[k]])
        sims, norms, nh = _chunk_sims(h, emb, union)
        z = sims / tau
        z -= z.max()
        e = np.exp(z)
        w_all = e / e.sum()
        coeff = w_all.copy()
        coeff[: assignment.pos_num] -= e[: assignment.pos_num] / e[: assignment.pos_num].sum()
        coeff /= tau
        # d sim / d h for every vector in the union, stacked row-wise
        dsim = emb[union] / (norms[:, None] * nh) - np.outer(sims, h) / nh**2
        grad[k] = coeff @ dsim / assignment.k
    return grad


def warmup_run(
    backend: ModelBackend,
    ctx: BackendContext,
    h0: np.ndarray,
    config: WarmupConfig,
) -> tuple[np.ndarray, WarmupTrace]:
    """Gradient-descend the latent state on the contrastive objective.

    Every step re-reads the backend's attention, re-ranks the visual
    tokens, and re-assigns chunks before taking one descent step, so the
    supervision always reflects the current latent state.
    """
    latents = ensure_latents(h0, dim=ctx.latent_dim).copy()
    k = latents.shape[0]
    learning_rate = config.resolve_learning_rate(latents)
    losses = []
    grad_norms = []

    def _supervision(current: np.ndarray):
        out = backend.evaluate(ctx, current)
        scores = relevance_scores(out.qv_attention)
        assignment = assign_chunks(rank_descending(scores), k, config.pos_num, config.neg_num)
        return out.visual_embeddings, assignment

    for _ in range(config.n_sft):
        emb, assignment = _supervision(latents)
        losses.append(contrastive_loss(latents, emb, assignment, config.tau))
        grad = contrastive_grad(latents, emb, assignment, config.tau)
        grad_norms.append(float(np.linalg.norm(grad)))
        latents = latents - learning_rate * grad

    emb, assignment = _supervision(latents)
    losses.append(contrastive_loss(latents, emb, assignment, config.tau))
    trace = WarmupTrace(
        loss_per_step=np.asarray(losses), grad_norm_per_step=np.asarray(grad_norms)
    )
    return latents, trace
