"""Stage II: reward-driven perturbation of the latent state.

A single Gaussian perturbation per step is scored with the
confidence-progression reward - the mean hinged decrease of top-delta
next-token entropy along the latent span - and folded back through the
single-sample NES estimator  H <- H + (alpha / sigma^2) * R * eps.  The
exploration radius sigma decays geometrically, and the best-scoring
state seen during the run is what gets returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend.base import ModelBackend
from .backend.types import BackendContext, ensure_latents

__all__ = [
    "ReinforceConfig",
    "RewardTrace",
    "topk_entropy",
    "progression_reward",
    "progression_reward_from_entropies",
    "entropy_profile",
    "sigma_at",
    "nes_step",
    "reinforce_run",
]

_DISTRIBUTION_TOL = 1e-6


@dataclass(frozen=True)
class ReinforceConfig:
    """Stage II knobs.  ``sigma0=None`` resolves to 0.1 * RMS of the
    incoming latent state, keeping perturbations proportionate."""

    alpha: float = 0.02
    sigma0: float | None = None
    gamma: float = 0.9
    delta: int = 10
    n_rl: int = 15

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.sigma0 is not None and self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.delta < 1:
            raise ValueError("delta must be at least 1")
        if self.n_rl < 0:
            raise ValueError("n_rl must be non-negative")

    def resolve_sigma0(self, latents: np.ndarray) -> float:
        if self.sigma0 is not None:
            return self.sigma0
        rms = float(np.sqrt(np.mean(np.square(latents))))
        return 0.1 * rms if rms > 0 else 0.1


@dataclass(frozen=True, eq=False)
class RewardTrace:
    """Per-step candidate rewards, running best, and entropy profiles."""

    reward_per_step: np.ndarray
    best_reward_per_step: np.ndarray
    entropy_profiles: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, RewardTrace):
            return NotImplemented
        return (
            np.array_equal(self.reward_per_step, other.reward_per_step)
            and np.array_equal(self.best_reward_per_step, other.best_reward_per_step)
            and np.array_equal(self.entropy_profiles, other.entropy_profiles)
        )

    def __post_init__(self):
        reward = np.asarray(self.reward_per_step, dtype=np.float64)
        best = np.asarray(self.best_reward_per_step, dtype=np.float64)
        profiles = np.asarray(self.entropy_profiles, dtype=np.float64)
        object.__setattr__(self, "reward_per_step", reward)
        object.__setattr__(self, "best_reward_per_step", best)
        object.__setattr__(self, "entropy_profiles", profiles)
        if reward.shape != best.shape or profiles.shape[:1] != reward.shape:
            raise ValueError("trace series lengths disagree")
        if np.any(np.diff(best) < 0):
            raise ValueError("best reward series must be non-decreasing")


def topk_entropy(probs: np.ndarray, delta: int) -> float:
    """Shannon entropy (natural log) of the delta largest probabilities.

    The top-delta masses are used as-is, without renormalization; zero
    masses contribute zero.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if delta < 1:
        raise ValueError("delta must be at least 1")
    if probs.ndim != 1 or probs.shape[0] < 1:
        raise ValueError("probs must be a nonempty vector")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > _DISTRIBUTION_TOL:
        raise ValueError("probs must be a probability distribution")
    if delta < probs.shape[0]:
        top = np.partition(probs, -delta)[-delta:]
    else:
        top = probs
    nz = top[top > 0]
    return float(-(nz * np.log(nz)).sum())


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def entropy_profile(latent_logits: np.ndarray, delta: int) -> np.ndarray:
    """Top-delta entropy of the softmaxed logits at every latent position."""
    logits = np.asarray(latent_logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValueError("latent logits must be a nonempty K x vocab matrix")
    probs = _softmax_rows(logits)
    return np.asarray([topk_entropy(row, delta) for row in probs])


def progression_reward_from_entropies(entropies: np.ndarray) -> float:
    """Mean hinged entropy decrease along the latent span; 0 for K = 1."""
    e = np.asarray(entropies, dtype=np.float64)
    if e.ndim != 1 or e.shape[0] < 1:
        raise ValueError("entropy profile must be a nonempty vector")
    if e.shape[0] == 1:
        return 0.0
    drops = np.maximum(0.0, e[:-1] - e[1:])
    return float(drops.mean())


def progression_reward(latent_logits: np.ndarray, delta: int) -> float:
    """Confidence-progression reward of a latent evaluation."""
    return progression_reward_from_entropies(entropy_profile(latent_logits, delta))


def sigma_at(step_index: int, config: ReinforceConfig, sigma0: float | None = None) -> float:
    """Geometrically decayed exploration scale at a relative step index."""
    if step_index < 0:
        raise ValueError("step index must be non-negative")
    base = sigma0 if sigma0 is not None else config.sigma0
    if base is None:
        raise ValueError("sigma0 is unresolved; pass the starting scale explicitly")
    return base * config.gamma**step_index


def nes_step(
    latents: np.ndarray,
    eps: np.ndarray,
    sigma: float,
    alpha: float,
    reward: float,
) -> np.ndarray:
    """Single-sample NES update; a zero reward leaves the state bit-identical."""
    latents = np.asarray(latents, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if latents.shape != eps.shape:
        raise ValueError("noise shape must match the latent state")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if reward == 0.0:
        return latents.copy()
    return latents + (alpha / sigma**2) * reward * eps


def reinforce_run(
    backend: ModelBackend,
    ctx: BackendContext,
    h_sft: np.ndarray,
    config: ReinforceConfig,
    rng_seed: int,
) -> tuple[np.ndarray, RewardTrace]:
    """Run the perturb-score-update loop and keep the best-scoring state.

    The comparison reward belongs to the perturbed candidate, but the
    retained state is the post-update one, and the running best starts at
    the reward of the incoming state - both deliberately literal choices.
    Sampling uses a dedicated PCG64 generator, so a fixed seed reproduces
    the run bit-for-bit.
    """
    latents = ensure_latents(h_sft, dim=ctx.latent_dim).copy()
    if config.n_rl == 0:
        empty = np.empty((0,))
        trace = RewardTrace(empty, empty.copy(), np.empty((0, latents.shape[0])))
        return latents, trace

    rng = np.random.Generator(np.random.PCG64(rng_seed))
    sigma0 = config.resolve_sigma0(latents)
    best_state = latents.copy()
    best_reward = progression_reward(
        backend.evaluate(ctx, latents).latent_logits, config.delta
    )

    rewards = []
    bests = []
    profiles = []
    for i in range(config.n_rl):
        sigma = sigma_at(i, config, sigma0)
        eps = rng.standard_normal(latents.shape) * sigma
        candidate = latents + eps
        out = backend.evaluate(ctx, candidate)
        profile = entropy_profile(out.latent_logits, config.delta)
        reward = progression_reward_from_entropies(profile)
        latents = nes_step(latents, eps, sigma, config.alpha, reward)
        if reward > best_reward:
            best_reward = reward
            best_state = latents.copy()
        rewards.append(reward)
        bests.append(best_reward)
        profiles.append(profile)

    trace = RewardTrace(
        reward_per_step=np.asarray(rewards),
        best_reward_per_step=np.asarray(bests),
        entropy_profiles=np.stack(profiles),
    )
    return best_state, trace
